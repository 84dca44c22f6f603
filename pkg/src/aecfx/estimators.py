"""scikit-learn style wrappers around the detector and the explainers.

``X`` is always a 3-D array of windows ``(n_windows, n_channels, length)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import detector, explainer
from .autoencoder import TrainConfig, build_model, train
from .exceptions import DataError, UsageError


def check_windows(X, n_channels: int | None = None, length: int | None = None) -> np.ndarray:
    """Validate a batch of windows and return it as a C-contiguous float64 array.

    Raises
    ------
    DataError
        If ``X`` is not 3-D, is empty, holds non-finite values or has the
        wrong channel count / window length.
    """
    X = np.ascontiguousarray(getattr(X, "windows", X), dtype=np.float64)
    if X.ndim != 3:
        raise DataError(f"expected windows of shape (n_windows, n_channels, length), got {X.shape}")
    if len(X) == 0:
        raise DataError("no windows given")
    if not np.isfinite(X).all():
        raise DataError("windows contain NaN or infinite values")
    if n_channels is not None and X.shape[1] != n_channels:
        raise DataError(f"expected {n_channels} channels, got {X.shape[1]}")
    if length is not None and X.shape[2] != length:
        raise DataError(f"expected window length {length}, got {X.shape[2]}")
    return X


class AutoencoderAnomalyDetector(BaseEstimator):
    """Reconstruction-score anomaly detector.

    Parameters
    ----------
    architecture : {"skab", "industrial"}
    k : float
        Threshold is the validation score mean plus ``k`` standard deviations.
    epochs, batch_size, learning_rate, amsgrad, huber_beta : see TrainConfig
    arch_options : dict, optional
        Overrides passed to the architecture builder.
    random_state : int
        Seeds both the weight initialization and the batch shuffling.

    Attributes
    ----------
    model_ : AeModel
    profile_ : DetectorProfile
    threshold_ : float
    history_ : dict
    """

    def __init__(
        self,
        architecture="skab",
        k=8.0,
        epochs=150,
        batch_size=64,
        learning_rate=1e-3,
        amsgrad=False,
        huber_beta=1.0,
        arch_options=None,
        random_state=125,
    ):
        self.architecture = architecture
        self.k = k
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.amsgrad = amsgrad
        self.huber_beta = huber_beta
        self.arch_options = arch_options
        self.random_state = random_state

    def fit(self, X, y=None, X_valid=None):
        """Train on normal windows ``X``; calibrate the threshold on ``X_valid``
        (``X`` itself when omitted). ``y`` is ignored."""
        X = check_windows(X)
        V = X if X_valid is None else check_windows(X_valid, X.shape[1], X.shape[2])
        model = build_model(
            self.architecture, X.shape[1], X.shape[2], seed=self.random_state,
            **(self.arch_options or {}),
        )
        config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            amsgrad=self.amsgrad, seed=self.random_state, huber_beta=self.huber_beta,
        )
        self.model_, self.history_ = train(model, X, V, config)
        self._calibrate(V)
        return self

    @classmethod
    def from_model(cls, model, X_valid, k=8.0):
        """Wrap an already trained model and calibrate it on ``X_valid``."""
        est = cls(architecture=model.architecture, k=k)
        est.model_ = model
        est.history_ = None
        est._calibrate(check_windows(X_valid, *model.input_shape))
        return est

    def _calibrate(self, V):
        self.profile_ = detector.calibrate(self.model_, V, self.k)
        self.threshold_ = self.profile_.threshold
        self.n_channels_, self.length_ = self.model_.input_shape

    def _check(self, X):
        check_is_fitted(self, "profile_")
        return check_windows(X, self.n_channels_, self.length_)

    def score_samples(self, X) -> np.ndarray:
        """Anomaly score of each window (higher is more anomalous)."""
        X = self._check(X)
        return detector.score_windows(self.model_, X)

    def decision_function(self, X) -> np.ndarray:
        """Score minus threshold; positive means anomalous."""
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        """1 for anomalous windows, 0 for normal ones."""
        return detector.classify_scores(self.score_samples(X), self.profile_).astype(np.int64)


class CounterfactualExplainer(TransformerMixin, BaseEstimator):
    """Counterfactual explanations for windows a fitted detector flags.

    ``transform`` maps flagged windows to counterfactual windows of the same
    shape; ``explain`` returns the full :class:`Explanation` records.

    Parameters
    ----------
    detector : AutoencoderAnomalyDetector
        Already fitted.
    method : {"ours", "counterfactual", "reconstruction"}
        Feature-selected descent, descent on all features with a unit
        distance weight, or the reconstruction itself.
    """

    def __init__(
        self,
        detector=None,
        method="ours",
        lam=None,
        eta=0.01,
        max_iters=75_000,
        early_stop=False,
        m=0.75,
        q=90.0,
        duration_frac=0.9,
        batch_size=256,
        n_jobs=1,
    ):
        self.detector = detector
        self.method = method
        self.lam = lam
        self.eta = eta
        self.max_iters = max_iters
        self.early_stop = early_stop
        self.m = m
        self.q = q
        self.duration_frac = duration_frac
        self.batch_size = batch_size
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        if self.detector is None:
            raise UsageError("CounterfactualExplainer needs a fitted detector")
        check_is_fitted(self.detector, "profile_")
        if self.method not in explainer.METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {explainer.METHODS}")
        defaults = explainer.ExplainerSettings()
        self.settings_ = explainer.ExplainerSettings(
            lam_ours=defaults.lam_ours if self.lam is None else float(self.lam),
            lam_counterfactual=defaults.lam_counterfactual if self.lam is None else float(self.lam),
            eta=self.eta, max_iters=self.max_iters, early_stop=self.early_stop, m=self.m,
            q=self.q, duration_frac=self.duration_frac, batch_size=self.batch_size,
            n_jobs=self.n_jobs,
        )
        return self

    def explain(self, X) -> list:
        check_is_fitted(self, "settings_")
        X = self.detector._check(X)
        return explainer.explain_windows(
            self.detector.model_, self.detector.profile_, X, self.method, self.settings_,
        )

    def transform(self, X) -> np.ndarray:
        return np.stack([e.counterfactual for e in self.explain(X)])
