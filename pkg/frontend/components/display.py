"""Result display components: span table, mask images, retention report."""
import base64
from typing import Any, Dict, List, Optional

import numpy as np
import streamlit as st


def decode_pgm(pgm_base64: str) -> np.ndarray:
    """Binary P5 graymap (base64) to a uint8 image array."""
    data = base64.b64decode(pgm_base64)
    # header is "P5\n<width> <height>\n255\n"
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    width, height = (int(x) for x in dims.split())
    return np.frombuffer(body, dtype=np.uint8, count=width * height).reshape(height, width)


def render_span_table(rows: List[Dict[str, Any]]):
    if not rows:
        st.info("No cascade count divides the chosen capacity.")
        return
    st.dataframe(
        [
            {
                "N": r["num_cascades"],
                "token span": r["token_span"],
                "overall sparsity": round(r["overall_sparsity"], 4),
                "window sparsity": round(r["window_sparsity"], 4),
                "expected accuracy": round(r["expected_accuracy"], 4),
            }
            for r in rows
        ],
        use_container_width=True,
        hide_index=True,
    )


def render_mask_pair(masks: Dict[str, Optional[Dict[str, Any]]]):
    """Masks side by side with their row budget and reach."""
    columns = st.columns(len(masks))
    for column, (policy, result) in zip(columns, masks.items()):
        with column:
            st.markdown(f"**{policy}**")
            if result is None:
                st.warning("No mask")
                continue
            st.image(decode_pgm(result["pgm_base64"]), use_container_width=True, clamp=True)
            st.caption(
                f"max row nonzeros {result['max_row_nonzeros']} / budget {result['row_budget']} · "
                f"last row reaches back {result['final_reach']} tokens"
            )


def render_retention_report(report: Dict[str, Any]):
    metrics = st.columns(4)
    metrics[0].metric("Token span", report["token_span"])
    metrics[1].metric("Empirical span", report["empirical_span"])
    metrics[2].metric("Overall sparsity", f"{report['overall_sparsity']:.3f}")
    metrics[3].metric("Window sparsity", f"{report['window_sparsity']:.3f}")

    records = report.get("records", [])
    if not records:
        st.info("The stream had no marked tokens.")
        return
    for record in records:
        if record["resident"]:
            where = "sink" if record["final_sub_cache"] == 0 else f"sub-cache {record['final_sub_cache']}"
            st.success(f"✅ Token {record['marked_pos']} is still resident ({where})")
        else:
            st.error(f"❌ Token {record['marked_pos']} was evicted after {record['survival_steps']} steps")
    st.dataframe(records, use_container_width=True, hide_index=True)
