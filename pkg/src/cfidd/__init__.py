"""Cell-free massive MIMO uplink simulator: two-stage iterative detection and
decoding with LLR-based access point selection."""

__version__ = "0.1.0"
