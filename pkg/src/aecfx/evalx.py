"""Validity, sparsity and distance of counterfactual explanations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import score_windows
from .exceptions import DataError

EPSILON = 0.005


def _stack_pairs(pairs):
    """Accept ``(X, X_cf)`` arrays, a list of pairs, or Explanation objects."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 3:
        X, C = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise DataError("no explanations to evaluate")
        if hasattr(pairs[0], "counterfactual"):
            X = [e.original for e in pairs]
            C = [e.counterfactual for e in pairs]
        else:
            X, C = zip(*pairs)
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if X.shape != C.shape:
        raise DataError(f"shape mismatch between samples {X.shape} and counterfactuals {C.shape}")
    if X.ndim == 2:
        X, C = X[None], C[None]
    if len(X) == 0:
        raise DataError("no explanations to evaluate")
    return X, C


def valid_flags(explanations, model, threshold: float) -> np.ndarray:
    """Per explanation: is the counterfactual's fresh score below ``threshold``."""
    C = np.asarray([getattr(e, "counterfactual", e) for e in explanations], dtype=np.float64)
    if len(C) == 0:
        raise DataError("no explanations to evaluate")
    return score_windows(model, C) < threshold


def validity(explanations, model, threshold: float) -> float:
    """Fraction of counterfactuals scored strictly below the threshold.

    Scores are recomputed with ``model``; values stored on the explanations
    are ignored.
    """
    return float(np.mean(valid_flags(explanations, model, threshold)))


def changed_features(pairs, eps: float = EPSILON) -> np.ndarray:
    """``(N, n)`` indicator: time-averaged absolute change of a feature > eps."""
    X, C = _stack_pairs(pairs)
    return np.mean(np.abs(X - C), axis=2) > eps


def sparsity(pairs, eps: float = EPSILON) -> float:
    """Mean over pairs of the fraction of features changed by more than ``eps``."""
    return float(np.mean(changed_features(pairs, eps)))


def distance(pairs) -> float:
    """Mean absolute difference between samples and counterfactuals."""
    X, C = _stack_pairs(pairs)
    return float(np.mean(np.mean(np.abs(X - C), axis=(1, 2))))


def validity_from_counts(valid: int, total: int) -> float:
    if total <= 0:
        raise DataError("validity needs at least one explanation")
    return valid / total


def validity_confusion(valid, flagged_labels) -> dict:
    """Valid / not-valid counts split by detection outcome.

    Parameters
    ----------
    valid : sequence of bool
        Validity of each explained window.
    flagged_labels : sequence of int
        Ground truth of each explained (hence flagged) window: 1 means the
        detection was a true positive, 0 a false positive.
    """
    valid = np.asarray(valid, dtype=bool)
    truth = np.asarray(flagged_labels, dtype=bool)
    if valid.shape != truth.shape:
        raise DataError("one ground-truth label per explanation is required")
    table = {
        "TP": {"valid": int(np.sum(truth & valid)), "not_valid": int(np.sum(truth & ~valid))},
        "FP": {"valid": int(np.sum(~truth & valid)), "not_valid": int(np.sum(~truth & ~valid))},
    }
    for row in table.values():
        row["total"] = row["valid"] + row["not_valid"]
    table["total"] = {
        key: table["TP"][key] + table["FP"][key] for key in ("valid", "not_valid", "total")
    }
    return table


@dataclass
class ExplanationMetrics:
    method: str
    validity: float | None
    sparsity: float | None
    distance: float | None
    n: int
    epsilon: float = EPSILON
    valid: list = field(default_factory=list, repr=False)
    changed_fraction: list = field(default_factory=list, repr=False)
    distances: list = field(default_factory=list, repr=False)
    confusion: dict | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "epsilon": self.epsilon,
            "validity": self.validity,
            "sparsity": self.sparsity,
            "distance": self.distance,
            "validity_confusion": self.confusion,
        }


def evaluate_explanations(
    explanations: Sequence,
    model,
    threshold: float,
    eps: float = EPSILON,
    method: str | None = None,
    flagged_labels=None,
) -> ExplanationMetrics:
    """All three measures plus the per-explanation terms they average.

    Explanations carrying an ``error`` are excluded. An empty set yields
    ``None`` metrics.
    """
    ok = [e for e in explanations if getattr(e, "error", None) is None]
    if method is None:
        method = ok[0].method if ok else "unknown"
    if not ok:
        return ExplanationMetrics(method, None, None, None, 0, eps)
    flags = valid_flags(ok, model, threshold)
    X, C = _stack_pairs(ok)
    frac = np.mean(np.mean(np.abs(X - C), axis=2) > eps, axis=1)
    dists = np.mean(np.abs(X - C), axis=(1, 2))
    confusion = None
    if flagged_labels is not None:
        keep = [i for i, e in enumerate(explanations) if getattr(e, "error", None) is None]
        confusion = validity_confusion(flags, np.asarray(flagged_labels)[keep])
    return ExplanationMetrics(
        method,
        float(np.mean(flags)),
        float(np.mean(frac)),
        float(np.mean(dists)),
        len(ok),
        eps,
        flags.tolist(),
        frac.tolist(),
        dists.tolist(),
        confusion,
    )


TABLE_COLUMNS = ("method", "n", "validity", "sparsity", "distance")


def write_metrics_table(rows: Sequence[ExplanationMetrics], path) -> Path:
    """CSV with one row per method: method, n, validity, sparsity, distance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.n] + ["" if v is None else repr(v) for v in (r.validity, r.sparsity, r.distance)])
    return path


def write_metrics_json(rows: Sequence[ExplanationMetrics], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
    return path
