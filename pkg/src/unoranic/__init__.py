"""Dual-branch autoencoder that separates corruption-invariant anatomy
features from image-specific characteristic features, plus the evaluation
harness (reconstruction quality, corruption revision, linear probes,
robustness sweeps)."""

__version__ = "0.1.0"
