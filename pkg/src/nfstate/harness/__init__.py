"""Traffic, wiring, metrics and experiment runners."""
