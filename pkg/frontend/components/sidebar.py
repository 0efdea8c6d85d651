"""Sidebar configuration component."""
import os

import streamlit as st
from dotenv import load_dotenv

POLICIES = ["cascade_full", "cascade_no_selection", "streaming_llm_sink", "sliding_window"]


def render_sidebar():
    """
    Render the sidebar with cache and workload parameters.

    Returns:
        tuple: (backend URL from the environment, dict of parameters)
    """
    with st.sidebar:
        st.subheader("⚙️ Cache")
        capacity = st.number_input("Capacity |C|", min_value=1, value=256, step=16)
        cascades = st.selectbox("Cascades N", [1, 2, 4, 8, 16], index=2)
        sink_size = st.number_input("Sink tokens", min_value=0, value=2)
        ema_gamma = st.number_input("EMA gamma", min_value=0.0, max_value=1.0, value=0.9999, format="%.4f")

        st.divider()
        st.subheader("🧩 Mask")
        mask_length = st.number_input("Sequence length", min_value=1, max_value=4096, value=1024)
        stride = st.number_input("Prefill stride", min_value=1, value=1)
        seq_len = st.number_input("Context for the span table", min_value=1, value=32768)

        st.divider()
        st.subheader("🎯 Retention")
        policy = st.selectbox("Policy", POLICIES)
        stream_length = st.number_input("Stream length", min_value=1, value=4096)
        marked_pos = st.number_input("Heavy token position", min_value=0, value=2048)
        weight = st.number_input("Heavy token weight", min_value=0.0, value=1000.0)
        seed = st.number_input("Seed", min_value=0, value=0)

        st.divider()
        st.caption("Version: 0.1.0")
        if capacity % cascades:
            st.warning(f"Capacity {capacity} is not divisible by N={cascades}")

    params = {
        "config": {
            "total_capacity": int(capacity),
            "num_cascades": int(cascades),
            "sink_size": int(sink_size),
            "ema_gamma": float(ema_gamma),
        },
        "mask_length": int(mask_length),
        "stride": int(stride),
        "seq_len": int(seq_len),
        "policy": policy,
        "stream_length": int(stream_length),
        "marked_pos": int(min(marked_pos, stream_length - 1)),
        "weight": float(weight),
        "seed": int(seed),
    }
    return backend_url(), params


def backend_url() -> str:
    """Backend URL from the environment or a local .env file."""
    load_dotenv()
    return os.getenv("BACKEND_URL", "http://localhost:8000")
