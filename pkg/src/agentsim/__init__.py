"""Co-design simulator for agent-scheduled CPU/FPGA neural-network inference."""
