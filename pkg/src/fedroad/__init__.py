"""Deterministic simulator for communication-efficient, privacy-preserving
multimodal federated learning: numeric kernel, toy multimodal detector,
payload compressors, a local-differential-privacy pipeline, the federated
protocol engine, data generators/partitioners, and a CLI."""

from .numcore import ModelParams, RngStream, Tensor

__all__ = ["Tensor", "ModelParams", "RngStream"]
__version__ = "0.1.0"
