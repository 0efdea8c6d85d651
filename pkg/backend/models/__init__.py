"""Data models package."""
from .schemas import (
    CascadeConfig,
    AttentionParams,
    PrefillConfig,
    HeadPolicy,
    HeadReduction,
    PolicyKind,
    ScoreProfile,
    MarkedToken,
    SyntheticStream,
    RetentionRecord,
    RetentionReport,
    VerificationCheck,
    VerificationReport,
    BenchRecord,
    RunConfig,
)

__all__ = [
    "CascadeConfig",
    "AttentionParams",
    "PrefillConfig",
    "HeadPolicy",
    "HeadReduction",
    "PolicyKind",
    "ScoreProfile",
    "MarkedToken",
    "SyntheticStream",
    "RetentionRecord",
    "RetentionReport",
    "VerificationCheck",
    "VerificationReport",
    "BenchRecord",
    "RunConfig",
]
