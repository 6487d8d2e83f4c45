"""Adversarial domain adaptation for remaining-useful-life regression.

An LSTM feature extractor is trained jointly with a source-domain RUL
regressor and an adversarial domain classifier wired through a
gradient-reversal layer, so that features transfer from a labelled source
domain to an unlabelled target domain. Includes the full turbofan data
pipeline, single-domain and correlation-alignment baselines, and the
asymmetric scoring metric used in the prognostics literature.
"""

from . import baselines, checkpoint, dann, data, linalg, layers, losses, optim

__all__ = ["baselines", "checkpoint", "dann", "data", "linalg", "layers", "losses", "optim"]
