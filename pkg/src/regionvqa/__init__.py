"""Region-feature visual question answering: detector features, a BERT-style
question encoder, bilinear attention fusion, training, evaluation and ensembling."""

from .errors import (BackwardError, ConfigurationError, DimensionError, DivergenceError, FormatError,
                     NonDeterminismError)
from .estimators import BanVQAClassifier, ProbabilityAveragingEnsemble, RegionFeatureExtractor, VqaPipeline

__version__ = "0.1.0"

__all__ = [
    "BackwardError", "BanVQAClassifier", "ConfigurationError", "DimensionError", "DivergenceError", "FormatError",
    "NonDeterminismError", "ProbabilityAveragingEnsemble", "RegionFeatureExtractor", "VqaPipeline", "__version__",
]
