"""Auto-encoder anomaly detection for multivariate time series with
feature-selected counterfactual explanations."""

from .autoencoder import AeModel, TrainConfig, build_model, load_model, reconstruct, save_model, train
from .detector import DetectionReport, DetectorProfile, calibrate, classify, detection_metrics, score_windows
from .estimators import AutoencoderAnomalyDetector, CounterfactualExplainer, check_windows
from .evalx import distance, evaluate_explanations, sparsity, validity
from .exceptions import (
    AecfxError,
    ChecksumError,
    ConfigurationError,
    DataError,
    FormatVersionError,
    ModelFormatError,
    NonFiniteError,
    UsageError,
)
from .explainer import (
    Explanation,
    FeatureMask,
    explain_counterfactual,
    explain_counterfactual_full,
    explain_reconstruction,
    explain_windows,
    select_features,
)
from .tensorcore import GradientTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AeModel",
    "TrainConfig",
    "build_model",
    "load_model",
    "reconstruct",
    "save_model",
    "train",
    "DetectionReport",
    "DetectorProfile",
    "calibrate",
    "classify",
    "detection_metrics",
    "score_windows",
    "AutoencoderAnomalyDetector",
    "CounterfactualExplainer",
    "check_windows",
    "distance",
    "evaluate_explanations",
    "sparsity",
    "validity",
    "AecfxError",
    "ChecksumError",
    "ConfigurationError",
    "DataError",
    "FormatVersionError",
    "ModelFormatError",
    "NonFiniteError",
    "UsageError",
    "Explanation",
    "FeatureMask",
    "explain_counterfactual",
    "explain_counterfactual_full",
    "explain_reconstruction",
    "explain_windows",
    "select_features",
    "GradientTape",
    "Tensor",
    "backward",
]
