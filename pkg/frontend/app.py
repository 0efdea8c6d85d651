"""Streamlit explorer for cascading KV cache behaviour."""
import streamlit as st
import requests
from components.display import render_mask_pair, render_retention_report, render_span_table
from components.sidebar import render_sidebar

# Page configuration
st.set_page_config(
    page_title="Cascading KV Cache Explorer",
    page_icon="🧮",
    layout="wide",
    initial_sidebar_state="expanded",
)

st.markdown("""
    <style>
    .main-header {
        font-size: 2.2rem;
        font-weight: 700;
        margin-bottom: 1rem;
    }
    /* Masks are small binary images; keep pixels crisp */
    [data-testid="stImage"] img {
        image-rendering: pixelated;
    }
    </style>
""", unsafe_allow_html=True)


def fetch_span_rows(backend_url, capacity, seq_len):
    """One /api/span row per cascade count that divides the capacity."""
    rows = []
    for cascades in (1, 2, 4, 8, 16):
        if capacity % cascades:
            continue
        response = requests.get(
            f"{backend_url}/api/span",
            params={"capacity": capacity, "cascades": cascades, "seq_len": seq_len},
            timeout=10,
        )
        if response.status_code != 200:
            st.error(f"Span request failed for N={cascades}: {response.text}")
            continue
        rows.append(response.json())
    return rows


def fetch_mask(backend_url, policy, params):
    payload = {
        "policy": policy,
        "config": params["config"],
        "length": params["mask_length"],
        "stride": params["stride"],
    }
    response = requests.post(f"{backend_url}/api/mask", json=payload, timeout=120)
    if response.status_code != 200:
        st.error(f"Mask request failed for {policy}: {response.text}")
        return None
    return response.json()


def main():
    """Main application entry point."""
    backend_url, params = render_sidebar()

    st.markdown('<div class="main-header">Cascading KV Cache Explorer</div>', unsafe_allow_html=True)

    try:
        health_response = requests.get(f"{backend_url}/health", timeout=2)
        if health_response.status_code != 200:
            st.error(f"⚠️ Backend health check failed: {health_response.status_code}")
    except requests.exceptions.RequestException:
        st.error(f"❌ Cannot connect to backend at {backend_url}. Make sure the FastAPI server is running.")
        st.info("Start the backend with: `uvicorn backend.main:app --reload --port 8000`")
        return

    config = params["config"]

    st.subheader("📏 Token span and sparsity")
    try:
        render_span_table(fetch_span_rows(backend_url, config["total_capacity"], params["seq_len"]))
    except requests.exceptions.RequestException as e:
        st.error(f"Error: {str(e)}")
    st.divider()

    st.subheader("🧩 Reconstructed attention masks")
    if st.button("Reconstruct masks", type="primary"):
        with st.spinner("Replaying streams..."):
            try:
                st.session_state.masks = {
                    policy: fetch_mask(backend_url, policy, params)
                    for policy in ("streaming_llm_sink", "cascade_no_selection")
                }
            except requests.exceptions.RequestException as e:
                st.error(f"Error: {str(e)}")
    if st.session_state.get("masks"):
        render_mask_pair(st.session_state.masks)
    st.divider()

    st.subheader("🎯 Heavy-token retention")
    if st.button("Run replay"):
        payload = {
            "policy": params["policy"],
            "config": config,
            "stream": {
                "length": params["stream_length"],
                "score_profile": "single_heavy",
                "marked": [{"pos": params["marked_pos"], "weight": params["weight"]}],
                "seed": params["seed"],
            },
        }
        with st.spinner("Replaying stream..."):
            try:
                response = requests.post(f"{backend_url}/api/simulate", json=payload, timeout=300)
                if response.status_code == 200:
                    st.session_state.retention = response.json()
                else:
                    st.error(f"Error running replay: {response.text}")
            except requests.exceptions.RequestException as e:
                st.error(f"Error: {str(e)}")
    if st.session_state.get("retention"):
        render_retention_report(st.session_state.retention)


if __name__ == "__main__":
    main()
