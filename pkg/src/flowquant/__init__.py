"""Quantized soft-sensor MLPs: QAT, integer-only inference and a MAC cycle model."""

__version__ = "0.1.0"
