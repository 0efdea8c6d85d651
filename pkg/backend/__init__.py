"""Cascading KV cache engine: ring stores, cascades, attention, prefill and workloads."""
