"""Few-shot open-set recognition with exemplar reconstruction.

The main entry points are :func:`refocs.engine.run_training`,
:func:`refocs.engine.evaluate`, the scikit-learn style
:class:`refocs.estimator.ReFOCSClassifier` and the ``refocs`` command line.
"""
from .config import RunConfig, glyph_benchmark_config
from .data import DatasetManifest, ExemplarImage, LabeledImage, generate_glyph_dataset
from .errors import ConfigError, DataError, NumericAbort, ReFOCSError
from .estimator import ExemplarEstimator, ReFOCSClassifier

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DatasetManifest", "ExemplarEstimator", "ExemplarImage",
    "LabeledImage", "NumericAbort", "ReFOCSClassifier", "ReFOCSError", "RunConfig",
    "generate_glyph_dataset", "glyph_benchmark_config",
]
