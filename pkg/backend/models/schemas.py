"""Pydantic models for configuration, reports and API payloads."""
import math
from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class HeadPolicy(str, Enum):
    """How eviction decisions are shared across attention heads."""

    HOMOGENEOUS = "homogeneous"
    INDEPENDENT = "independent"


class HeadReduction(str, Enum):
    """Element-wise reduction applied across the head axis of attention scores."""

    MEAN = "mean"
    MAX = "max"
    MEDIAN = "median"


class PolicyKind(str, Enum):
    """Eviction policies compared by the retention workloads."""

    SLIDING_WINDOW = "sliding_window"
    STREAMING_LLM_SINK = "streaming_llm_sink"
    CASCADE_NO_SELECTION = "cascade_no_selection"
    CASCADE_FULL = "cascade_full"


class ScoreProfile(str, Enum):
    """Synthetic attention profile injected during policy replays."""

    UNIFORM_RANDOM = "uniform_random"
    SINGLE_HEAVY = "single_heavy"
    MULTI_HEAVY = "multi_heavy"


# ============================================================================
# Cache and attention configuration
# ============================================================================

class CascadeConfig(BaseModel):
    """Hyperparameters of one cascading KV cache."""

    total_capacity: int = Field(4096, gt=0, description="|C|: non-sink tokens held across all sub-caches")
    num_cascades: int = Field(4, gt=0, description="N: number of sub-caches")
    sink_size: int = Field(64, ge=0, description="alpha: leading tokens kept forever")
    ema_gamma: float = Field(0.9999, ge=0.0, le=1.0, description="gamma: EMA factor for attention scores")
    selection_enabled: bool = Field(True, description="Keep the higher-scoring token at non-accepting boundaries")
    head_policy: HeadPolicy = Field(HeadPolicy.INDEPENDENT, description="Share decisions across heads or not")
    head_reduction: HeadReduction = Field(HeadReduction.MAX, description="Reduction over the head axis")

    @model_validator(mode="after")
    def _equal_sub_caches(self) -> "CascadeConfig":
        if self.total_capacity % self.num_cascades != 0:
            raise ValueError(
                f"total_capacity {self.total_capacity} is not divisible by num_cascades {self.num_cascades}"
            )
        return self

    @property
    def sub_capacity(self) -> int:
        return self.total_capacity // self.num_cascades


class AttentionParams(BaseModel):
    """Head layout and scaling for desk-scale attention."""

    dim: int = Field(16, gt=0, description="d: per-head dimension")
    num_q_heads: int = Field(4, gt=0, description="Number of query heads")
    num_kv_heads: int = Field(2, gt=0, description="Number of key-value heads (GQA)")
    scale: Optional[float] = Field(None, gt=0.0, description="Logit scale, defaults to 1/sqrt(d)")
    rope_base: float = Field(10000.0, gt=0.0, description="Rotary angle base")

    @model_validator(mode="after")
    def _gqa_grouping(self) -> "AttentionParams":
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_q_heads {self.num_q_heads} must be a multiple of num_kv_heads {self.num_kv_heads}"
            )
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.dim)
        return self

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def model_dim(self) -> int:
        return self.num_q_heads * self.dim


class PrefillConfig(BaseModel):
    """Strided prefill over a stack of attention-only layers."""

    stride: int = Field(1024, ge=1, description="K: tokens per chunk")
    layers: int = Field(1, gt=0, description="Number of layers")
    cache_config: CascadeConfig = Field(default_factory=CascadeConfig)
    attn: AttentionParams = Field(default_factory=AttentionParams)
    beta: Optional[float] = Field(None, description="Score EMA factor per query row, defaults to ema_gamma")
    precision: Literal["float32", "float64"] = Field("float32", description="Numeric precision of the hot path")
    seed: int = Field(0, description="Seed for the desk model projections")

    @field_validator("beta")
    @classmethod
    def _beta_open_interval(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 < value < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {value}")
        return value

    @property
    def score_beta(self) -> float:
        return self.beta if self.beta is not None else self.cache_config.ema_gamma


# ============================================================================
# Workload models
# ============================================================================

class MarkedToken(BaseModel):
    """A token whose fate is tracked through a replay."""

    pos: int = Field(..., ge=0, description="Stream position of the marked token")
    weight: float = Field(1000.0, ge=0.0, description="Attention weight relative to ordinary tokens")


class SyntheticStream(BaseModel):
    """A synthetic token stream with an injected attention profile."""

    length: int = Field(..., gt=0, description="Number of tokens")
    score_profile: ScoreProfile = Field(ScoreProfile.UNIFORM_RANDOM)
    marked: List[MarkedToken] = Field(default_factory=list, description="Heavy tokens (single_heavy: exactly one)")
    seed: int = Field(0)

    @model_validator(mode="after")
    def _marks_within_stream(self) -> "SyntheticStream":
        for mark in self.marked:
            if mark.pos >= self.length:
                raise ValueError(f"marked position {mark.pos} outside stream of length {self.length}")
        if self.score_profile == ScoreProfile.SINGLE_HEAVY and len(self.marked) != 1:
            raise ValueError("single_heavy needs exactly one marked token")
        if len({m.pos for m in self.marked}) != len(self.marked):
            raise ValueError("marked positions must be distinct")
        return self


class RetentionRecord(BaseModel):
    """Fate of one marked token at the end of a replay."""

    policy: PolicyKind
    num_cascades: int
    capacity: int
    seed: int
    marked_pos: int
    resident: bool
    final_sub_cache: Optional[int] = Field(None, description="0 = sink, 1..N = sub-cache, None = discarded")
    survival_steps: int = Field(..., description="Tokens seen after insertion while resident")
    empirical_span: int


class RetentionReport(BaseModel):
    """Outcome of replaying one stream through one policy."""

    policy: PolicyKind
    config: CascadeConfig
    stream_length: int
    records: List[RetentionRecord] = Field(default_factory=list)
    resident_count: int
    empirical_span: int = Field(..., description="Newest minus oldest resident non-sink position")
    token_span: int
    overall_sparsity: float
    window_sparsity: float


# ============================================================================
# Verification and benchmark models
# ============================================================================

class VerificationCheck(BaseModel):
    """Result of a single oracle check."""

    check_name: str = Field(..., description="Name of the check")
    status: str = Field(..., description="pass, warning, or fail")
    tolerance: str = Field(..., description="Tolerance the check was held to")
    details: str = Field(..., description="What was compared and the observed discrepancy")


class VerificationReport(BaseModel):
    """Aggregated verification result."""

    overall_status: str
    checks: List[VerificationCheck]
    warnings: List[str] = Field(default_factory=list)
    passed_checks: int
    failed_checks: int
    warning_checks: int


class BenchRecord(BaseModel):
    """One row of the latency table."""

    benchmark: str
    variant: str
    capacity: int
    cascades: int
    stride: int
    tokens: int
    runs: int
    median_s: float
    iqr_s: float
    per_op_s: float


# ============================================================================
# Run configuration (TOML file sections)
# ============================================================================

class PrefillSection(BaseModel):
    seq_len: int = Field(4096, gt=0)
    stride: int = Field(1024, ge=1)
    layers: int = Field(1, gt=0)
    beta: Optional[float] = None


class SimulateSection(BaseModel):
    policies: List[PolicyKind] = Field(
        default_factory=lambda: [PolicyKind.STREAMING_LLM_SINK, PolicyKind.CASCADE_NO_SELECTION, PolicyKind.CASCADE_FULL]
    )
    cascades: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    capacity: int = Field(64, gt=0)
    sink_size: int = Field(4, ge=0)
    contexts: List[int] = Field(default_factory=lambda: [8192])
    seeds: int = Field(100, gt=0)
    weight: float = Field(1000.0, ge=0.0)
    workers: int = Field(1, gt=0, description="Processes used across grid points")


class VerifySection(BaseModel):
    ring_sequences: int = Field(1000, gt=0)
    equivalence_streams: int = Field(1000, gt=0)
    equivalence_capacity: int = Field(8, gt=0)
    span_steps: int = Field(100_000, gt=0)
    ema_instances: int = Field(100, gt=0)
    retention_capacity: int = Field(64, gt=0, description="|C| for the retention checks; 4096 is acceptance scale")
    retention_seeds: int = Field(100, gt=0, description="Marked positions averaged by the retention checks")
    mask_length: int = Field(8192, gt=0)
    fault: Optional[Literal["swap-evict"]] = None


class BenchSection(BaseModel):
    tokens: int = Field(16384, gt=0)
    capacity: int = Field(16384, gt=0)
    dim: int = Field(128, gt=0)
    sink_size: int = Field(64, ge=0)
    seq_len: int = Field(65536, gt=0)
    strides: List[int] = Field(default_factory=lambda: [1, 256, 1024, 4096])
    prefill_capacity: int = Field(4096, gt=0)
    runs: int = Field(5, gt=0)
    warmup: int = Field(1, ge=0)


class VizSection(BaseModel):
    capacity: int = Field(2048, gt=0)
    cascades: int = Field(4, gt=0)
    sink_size: int = Field(2, ge=0)
    length: int = Field(8192, gt=0)
    stride: int = Field(1, ge=1)
    policies: List[PolicyKind] = Field(
        default_factory=lambda: [PolicyKind.STREAMING_LLM_SINK, PolicyKind.CASCADE_NO_SELECTION]
    )
    csv_mirror: bool = True


class RunConfig(BaseModel):
    """Full configuration read from a TOML file."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out_dir: str = "out"
    strict: bool = False
    cache: CascadeConfig = Field(default_factory=CascadeConfig)
    attention: AttentionParams = Field(default_factory=AttentionParams)
    prefill: PrefillSection = Field(default_factory=PrefillSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    bench: BenchSection = Field(default_factory=BenchSection)
    viz: VizSection = Field(default_factory=VizSection)


# ============================================================================
# API payloads
# ============================================================================

class SpanResponse(BaseModel):
    total_capacity: int
    num_cascades: int
    seq_len: int
    token_span: int
    overall_sparsity: float
    window_sparsity: float
    expected_accuracy: float


class SimulateRequest(BaseModel):
    policy: PolicyKind = PolicyKind.CASCADE_FULL
    config: CascadeConfig = Field(default_factory=lambda: CascadeConfig(total_capacity=64, sink_size=4))
    stream: SyntheticStream


class MaskRequest(BaseModel):
    policy: PolicyKind = PolicyKind.CASCADE_NO_SELECTION
    config: CascadeConfig = Field(default_factory=lambda: CascadeConfig(total_capacity=256, sink_size=2))
    length: int = Field(1024, gt=0, le=4096)
    stride: int = Field(1, ge=1)


class MaskResponse(BaseModel):
    policy: PolicyKind
    length: int
    stride: int
    max_row_nonzeros: int
    row_budget: int
    final_reach: int = Field(..., description="Distance from the last row to its oldest attended non-sink column")
    pgm_base64: str
