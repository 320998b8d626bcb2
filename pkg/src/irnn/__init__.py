"""Integer-only inference engine for quantized LSTM/attention models."""

__version__ = "0.1.0"
