"""Anomaly scoring, threshold calibration and detection metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .exceptions import DataError
from .tensorcore import Tensor


def score_windows(model, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Anomaly score (MSE + MAE against the reconstruction) of each window."""
    X = np.asarray(getattr(X, "windows", X), dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    out = np.empty(len(X))
    for s in range(0, len(X), batch_size):
        xb = Tensor(X[s : s + batch_size])
        out[s : s + len(xb.data)] = tc.anomaly_score(xb, model(xb), per_sample=True).data
    return out


@dataclass(frozen=True)
class DetectorProfile:
    threshold: float
    mean: float
    std: float
    k: float

    @classmethod
    def from_scores(cls, scores, k: float) -> "DetectorProfile":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise DataError("cannot calibrate on an empty validation set")
        mu = float(np.mean(scores))
        sigma = float(np.std(scores))  # population std
        return cls(mu + k * sigma, mu, sigma, float(k))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "mean": self.mean, "std": self.std, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorProfile":
        return cls(float(d["threshold"]), float(d["mean"]), float(d["std"]), float(d["k"]))


def calibrate(model, validation, k: float = 8.0) -> DetectorProfile:
    """Threshold ``mean + k * std`` of the validation windows' scores."""
    return DetectorProfile.from_scores(score_windows(model, validation), k)


def confusion_counts(labels, predictions) -> dict[str, int]:
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    return {
        "TP": int(np.sum(labels & predictions)),
        "FP": int(np.sum(~labels & predictions)),
        "TN": int(np.sum(~labels & ~predictions)),
        "FN": int(np.sum(labels & ~predictions)),
    }


def detection_metrics(tp: int, fp: int, tn: int, fn: int) -> dict:
    """F1, recall and false-positive rate from confusion counts.

    An undefined metric (zero denominator) is reported as ``None`` and its
    reason listed under ``"undefined"``.
    """
    out: dict = {"f1": None, "recall": None, "fpr": None, "undefined": {}}
    f1_den = tp + 0.5 * (fp + fn)
    if f1_den > 0:
        out["f1"] = tp / f1_den
    else:
        out["undefined"]["f1"] = "TP + FP + FN == 0"
    if tp + fn > 0:
        out["recall"] = tp / (tp + fn)
    else:
        out["undefined"]["recall"] = "no anomalous windows (TP + FN == 0)"
    if fp + tn > 0:
        out["fpr"] = fp / (fp + tn)
    else:
        out["undefined"]["fpr"] = "no normal windows (FP + TN == 0)"
    return out


@dataclass
class DetectionReport:
    scores: np.ndarray
    predictions: np.ndarray
    threshold: float
    labels: np.ndarray | None = None
    provenance: list = field(default_factory=list)
    counts: dict | None = None
    metrics: dict | None = None

    def to_dict(self) -> dict:
        """Summary with a fixed key order: threshold, window count, counts,
        f1, recall, fpr, undefined reasons."""
        d = {"threshold": self.threshold, "n_windows": int(len(self.scores)),
             "n_flagged": int(np.sum(self.predictions))}
        if self.counts is None:
            d["metrics_available"] = False
            d["reason"] = "windows are unlabeled"
            return d
        d["metrics_available"] = True
        d["confusion"] = {k: self.counts[k] for k in ("TP", "FP", "TN", "FN")}
        for key in ("f1", "recall", "fpr"):
            d[key] = self.metrics[key]
        d["undefined"] = self.metrics["undefined"]
        return d

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def write_rows(self, path) -> Path:
        """Per-window rows: file, start, score, label, prediction."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        prov = self.provenance or [("", i) for i in range(len(self.scores))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "start", "score", "label", "prediction"])
            for i, (f, s) in enumerate(prov):
                label = "" if self.labels is None else int(self.labels[i])
                w.writerow([f, s, repr(float(self.scores[i])), label, int(self.predictions[i])])
        return path


def classify_scores(scores, profile: DetectorProfile) -> np.ndarray:
    """1 where the score is strictly above the threshold; ties are normal."""
    return (np.asarray(scores) > profile.threshold).astype(np.int8)


def classify(model, profile: DetectorProfile, windows, labels=None, provenance: Sequence = ()) -> DetectionReport:
    """Score and classify windows; metrics are filled in when labels exist.

    ``windows`` may be a :class:`~aecfx.dataio.WindowSet`, whose labels and
    provenance are then used unless given explicitly.
    """
    if labels is None:
        labels = getattr(windows, "labels", None)
    if not provenance:
        provenance = getattr(windows, "provenance", ())
    scores = score_windows(model, windows)
    if scores.size == 0:
        raise DataError("no windows to classify")
    preds = classify_scores(scores, profile)
    report = DetectionReport(scores, preds, profile.threshold, None, list(provenance))
    if labels is not None:
        report.labels = np.asarray(labels, dtype=np.int8)
        report.counts = confusion_counts(report.labels, preds)
        c = report.counts
        report.metrics = detection_metrics(c["TP"], c["FP"], c["TN"], c["FN"])
    return report
