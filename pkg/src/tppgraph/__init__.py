"""Neural marked temporal point processes with closed-form mixture
intensities, five history-encoder families, latent-graph causality
discovery, and synthetic-process oracles for verification."""

from . import diffcore, embedding, encoders, events, granger, intensity, model, synth, trainer

__all__ = ["diffcore", "events", "embedding", "encoders", "intensity",
           "granger", "model", "synth", "trainer"]

__version__ = "0.1.0"
