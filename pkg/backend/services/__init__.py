"""Cache, attention, prefill, workload, verification and benchmark services."""
