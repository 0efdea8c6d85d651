"""API endpoint definitions."""
from fastapi import APIRouter, HTTPException, Query
from pydantic import ValidationError

from ..models.errors import CascadeError
from ..models.schemas import (
    CascadeConfig,
    MaskRequest,
    MaskResponse,
    RetentionReport,
    RunConfig,
    SimulateRequest,
    SpanResponse,
    SyntheticStream,
    VerificationReport,
)
from ..services.cascade_cache import expected_retrieval_accuracy, sparsity, token_span
from ..services.evaluator import run_verification
from ..services.exporters import mask_to_pgm_base64
from ..services.workloads import effective_config, oldest_reach, reconstruct_mask, replay_trace, row_nonzeros, run_retention

router = APIRouter()


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@router.get("/span", response_model=SpanResponse)
async def span_endpoint(
    capacity: int = Query(4096, gt=0),
    cascades: int = Query(4, gt=0),
    seq_len: int = Query(32768, gt=0),
):
    """
    Token span, sparsity pair and expected retrieval accuracy of one cache size.

    No sink tokens are counted; the span depends only on |C| and N.
    """
    try:
        config = CascadeConfig(total_capacity=capacity, num_cascades=cascades, sink_size=0)
        span = token_span(config)
        overall, window = sparsity(config, seq_len)
        return SpanResponse(
            total_capacity=capacity,
            num_cascades=cascades,
            seq_len=seq_len,
            token_span=span,
            overall_sparsity=overall,
            window_sparsity=window,
            expected_accuracy=expected_retrieval_accuracy(span, seq_len),
        )
    except (CascadeError, ValidationError) as e:
        raise _bad_request(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error computing span: {str(e)}")


@router.post("/simulate", response_model=RetentionReport)
def simulate_endpoint(request: SimulateRequest):
    """
    Replay a synthetic stream through one eviction policy.

    Returns the fate of every marked token plus span and sparsity of the
    configuration the policy actually ran with.
    """
    try:
        return run_retention(request.policy, request.config, request.stream)
    except CascadeError as e:
        raise _bad_request(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error running simulation: {str(e)}")


@router.post("/mask", response_model=MaskResponse)
def mask_endpoint(request: MaskRequest):
    """
    Reconstruct the attention mask a policy induces on a uniform stream.

    The image is a binary P5 graymap, base64 encoded; white cells were attended.
    """
    try:
        effective = effective_config(request.policy, request.config)
        trace = replay_trace(request.policy, request.config, SyntheticStream(length=request.length))
        mask = reconstruct_mask(trace, request.length, request.stride)
        reach = oldest_reach(mask, trace.sink_size)
        return MaskResponse(
            policy=request.policy,
            length=request.length,
            stride=request.stride,
            max_row_nonzeros=int(row_nonzeros(mask).max()),
            row_budget=effective.sink_size + effective.total_capacity + request.stride,
            final_reach=int(reach[-1]),
            pgm_base64=mask_to_pgm_base64(mask),
        )
    except CascadeError as e:
        raise _bad_request(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error reconstructing mask: {str(e)}")


@router.post("/verify", response_model=VerificationReport)
def verify_endpoint(seed: int = Query(0)):
    """
    Run the shrunken oracle suite (the long span replay is skipped).
    """
    try:
        return run_verification(RunConfig(seed=seed), quick=True)
    except CascadeError as e:
        raise _bad_request(e)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Error running verification: {str(e)}")
