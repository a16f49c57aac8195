"""Dual-stream contrastive vision-language toolkit.

A desk-scale implementation of dual-stream contrastive pre-training: two
modality backbones project into a common subspace, a weight-sharing
transformer encodes both streams, and training combines cross-modal and
single-modal contrastive objectives before triplet fine-tuning. Includes
a synthetic paired corpus, retrieval/matching evaluation, and an
inference-cost benchmark contrasting the double-stream O(n) pattern with
a one-stream O(n^2) simulation.
"""

__version__ = "0.1.0"

from .errors import (BenchmarkError, CheckpointError, ConfigError, ContractError,
                     CookieKitError, DataError, DimensionError, TrainingError)

__all__ = [
    "BenchmarkError", "CheckpointError", "ConfigError", "ContractError",
    "CookieKitError", "DataError", "DimensionError", "TrainingError",
    "__version__",
]
