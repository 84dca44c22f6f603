"""Feature selection and counterfactual explanations for flagged windows.

Three methods are provided:

``ours``
    :func:`select_features` picks the high-impact signals from the per-element
    anomaly score, then :func:`explain_counterfactual` runs gradient descent
    on the input with the gradient rows of all other signals zeroed.
``counterfactual``
    The same descent on every signal, with the distance term weighted by 1.
``reconstruction``
    The auto-encoder's reconstruction itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from . import tensorcore as tc
from .detector import DetectorProfile
from .exceptions import AecfxError, NonFiniteError, UsageError
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

METHODS = ("ours", "counterfactual", "reconstruction")


@dataclass(frozen=True)
class FeatureMask:
    selected: np.ndarray
    m: float = 0.75
    q: float = 90.0
    duration_frac: float = 0.9
    fallback: bool = False

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool)
        if sel.ndim != 1 or not sel.any():
            raise UsageError("a feature mask needs at least one selected feature")
        object.__setattr__(self, "selected", sel)

    @classmethod
    def all(cls, n: int) -> "FeatureMask":
        return cls(np.ones(n, dtype=bool))

    @property
    def indices(self) -> list[int]:
        return np.flatnonzero(self.selected).tolist()


def select_features(asw, m: float = 0.75, q: float = 90.0, duration_frac: float = 0.9) -> FeatureMask:
    """High-impact features of one window.

    A feature is selected when its element score exceeds ``m`` times the
    ``q``-th percentile of all element scores (linear interpolation) at more
    than ``duration_frac`` of the time steps. If none qualifies, the feature
    with the largest mean score is selected and ``fallback`` is set.
    """
    asw = np.asarray(getattr(asw, "data", asw), dtype=np.float64)
    if asw.ndim != 2:
        raise UsageError(f"expected an (n, l) score matrix, got shape {asw.shape}")
    level = m * np.percentile(asw, q)
    counts = np.sum(asw > level, axis=1)
    selected = counts > duration_frac * asw.shape[1]
    fallback = not selected.any()
    if fallback:
        selected = np.zeros(asw.shape[0], dtype=bool)
        selected[int(np.argmax(asw.mean(axis=1)))] = True
    return FeatureMask(selected, m, q, duration_frac, fallback)


def element_scores(model, X) -> np.ndarray:
    """Per-element anomaly scores of a window (or a batch) against the reconstruction."""
    x = Tensor(X)
    return tc.anomaly_score_window(x, model(x)).numpy()


@dataclass
class Explanation:
    original: np.ndarray
    mask: FeatureMask
    counterfactual: np.ndarray
    final_score: float
    iterations: int
    method: str
    lam: float = 0.0
    threshold: float | None = None
    objective: float | None = None
    provenance: tuple | None = None
    error: str | None = None

    @property
    def changed(self) -> np.ndarray:
        """Per feature: does any value of the counterfactual differ from the input."""
        return np.any(self.counterfactual != self.original, axis=1)


def _objective(model, xt: Tensor, anchor: Tensor, lam: float, cost: Callable):
    c = cost(xt, model(xt), per_sample=True)
    if lam == 0.0:
        return c, c
    return c, tc.add(c, tc.scale(tc.mean_abs_diff(anchor, xt, per_sample=True), lam))


def descend(
    model,
    X: np.ndarray,
    masks: np.ndarray,
    lam: float,
    eta: float,
    max_iters: int,
    threshold: float | None = None,
    early_stop: bool = False,
    cost: Callable = tc.anomaly_score,
):
    """Masked gradient descent on a batch of windows.

    Minimizes ``cost(x', model(x')) + lam * mean|X - x'|`` for each window
    independently, starting from ``x' = X``; rows of unselected features never
    change. Each window returns the iterate with the lowest objective among the
    ``max_iters + 1`` evaluated ones, or with ``early_stop``, the first iterate
    whose cost falls below ``threshold``.

    Parameters
    ----------
    X : (B, n, l) array
    masks : (B, n) bool array

    Returns
    -------
    best : (B, n, l) array
    iterations : (B,) int array
        Descent steps taken before the returned iterate's run stopped.
    best_objective : (B,) array
    """
    X = np.asarray(X, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if early_stop and threshold is None:
        raise UsageError("early_stop needs a threshold")
    B = len(X)
    row_mask = masks[:, :, None]
    x = X.copy()
    best = X.copy()
    best_obj = np.full(B, np.inf)
    iterations = np.full(B, max_iters)
    active = np.arange(B)
    anchor_all = X
    for i in range(max_iters + 1):
        try:
            xt = Tensor(x[active], requires_grad=True)
            anchor = Tensor(anchor_all[active])
            with tc.GradientTape() as tape:
                c, obj = _objective(model, xt, anchor, lam, cost)
                total = tc.tsum(obj)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite iterate or objective at iteration {i}: {exc}") from exc
        objv = obj.data
        better = objv < best_obj[active]
        upd = active[better]
        best[upd] = x[upd]
        best_obj[upd] = objv[better]
        if early_stop:
            hit = c.data < threshold
            if hit.any():
                done = active[hit]
                best[done] = x[done]
                best_obj[done] = objv[hit]
                iterations[done] = i
                active = active[~hit]
                if active.size == 0:
                    break
                xt_keep = ~hit
            else:
                xt_keep = None
        if i == max_iters:
            break
        try:
            grad = tc.backward(tape, total, [xt])[xt.id].data
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite gradient at iteration {i}: {exc}") from exc
        if early_stop and xt_keep is not None:
            grad = grad[xt_keep]
        sub = x[active]
        x[active] = np.where(row_mask[active], sub - eta * grad, sub)
    return best, iterations, best_obj


def _check_anomalous(model, profile: DetectorProfile, X: np.ndarray) -> float:
    x = Tensor(X)
    score = tc.anomaly_score(x, model(x)).item()
    if not score > profile.threshold:
        raise UsageError(
            f"window is not anomalous (score {score:.6g} <= threshold {profile.threshold:.6g})"
        )
    return score


def _final_score(model, xcf: np.ndarray) -> float:
    x = Tensor(xcf)
    return tc.anomaly_score(x, model(x)).item()


def explain_counterfactual(
    model,
    profile: DetectorProfile,
    X,
    mask: FeatureMask,
    lam: float = 0.0,
    eta: float = 0.01,
    max_iters: int = 75_000,
    early_stop: bool = False,
    cost: Callable = tc.anomaly_score,
    require_anomalous: bool = True,
    method: str = "ours",
) -> Explanation:
    """Counterfactual for one ``(n, l)`` window by masked gradient descent.

    ``cost`` is called as ``cost(x_cf, model(x_cf), per_sample=True)``; the
    default is the anomaly score, other costs are meant for testing.
    """
    X = np.asarray(X, dtype=np.float64)
    if mask.selected.shape != (X.shape[0],):
        raise UsageError(f"mask covers {mask.selected.size} features, window has {X.shape[0]}")
    if require_anomalous:
        _check_anomalous(model, profile, X)
    best, iters, obj = descend(
        model, X[None], mask.selected[None], lam, eta, max_iters, profile.threshold, early_stop, cost
    )
    xcf = best[0]
    return Explanation(
        X, mask, xcf, _final_score(model, xcf), int(iters[0]), method, float(lam),
        profile.threshold, float(obj[0]),
    )


def explain_counterfactual_full(
    model, profile: DetectorProfile, X, eta: float = 0.01, max_iters: int = 75_000,
    early_stop: bool = False, require_anomalous: bool = True,
) -> Explanation:
    """Counterfactual on every feature with unit distance weight."""
    X = np.asarray(X, dtype=np.float64)
    return explain_counterfactual(
        model, profile, X, FeatureMask.all(X.shape[0]), 1.0, eta, max_iters, early_stop,
        require_anomalous=require_anomalous, method="counterfactual",
    )


def explain_reconstruction(model, X, profile: DetectorProfile | None = None) -> Explanation:
    """Use the reconstruction ``model(X)`` as the explanation."""
    X = np.asarray(X, dtype=np.float64)
    xcf = model(Tensor(X)).numpy()
    return Explanation(
        X, FeatureMask.all(X.shape[0]), xcf, _final_score(model, xcf), 0, "reconstruction",
        0.0, None if profile is None else profile.threshold,
    )


@dataclass
class ExplainerSettings:
    lam_ours: float = 0.0
    lam_counterfactual: float = 1.0
    eta: float = 0.01
    max_iters: int = 75_000
    early_stop: bool = False
    m: float = 0.75
    q: float = 90.0
    duration_frac: float = 0.9
    batch_size: int = 256
    n_jobs: int = 1


def _explain_chunk(model, profile, X, method, s: ExplainerSettings, prov):
    if method == "reconstruction":
        return [
            Explanation(x, FeatureMask.all(x.shape[0]), r, _final_score(model, r), 0,
                        "reconstruction", 0.0, profile.threshold, provenance=p)
            for x, r, p in zip(X, model(Tensor(X)).numpy(), prov)
        ]
    if method == "ours":
        asw = element_scores(model, X)
        masks = [select_features(a, s.m, s.q, s.duration_frac) for a in asw]
        lam = s.lam_ours
    else:
        masks = [FeatureMask.all(X.shape[1]) for _ in X]
        lam = s.lam_counterfactual
    sel = np.stack([mk.selected for mk in masks])
    best, iters, obj = descend(model, X, sel, lam, s.eta, s.max_iters, profile.threshold, s.early_stop)
    finals = [float(v) for v in tc.anomaly_score(Tensor(best), model(Tensor(best)), per_sample=True).data]
    return [
        Explanation(X[i], masks[i], best[i], finals[i], int(iters[i]), method, float(lam),
                    profile.threshold, float(obj[i]), prov[i])
        for i in range(len(X))
    ]


def _explain_chunk_safe(model, profile, X, method, s, prov):
    try:
        return _explain_chunk(model, profile, X, method, s, prov)
    except AecfxError:
        if len(X) == 1:
            raise
    # isolate the failing window(s)
    out = []
    for i in range(len(X)):
        try:
            out.extend(_explain_chunk(model, profile, X[i : i + 1], method, s, prov[i : i + 1]))
        except AecfxError as exc:
            logger.warning("explanation failed for window %s: %s", prov[i], exc)
            out.append(Explanation(X[i], FeatureMask.all(X.shape[1]), X[i].copy(), float("nan"), 0,
                                   method, 0.0, profile.threshold, None, prov[i], str(exc)))
    return out


def explain_windows(
    model,
    profile: DetectorProfile,
    X: np.ndarray,
    method: str = "ours",
    settings: ExplainerSettings | None = None,
    provenance: Sequence | None = None,
    check_flagged: bool = True,
) -> list[Explanation]:
    """Explain every window of ``X`` with ``method``.

    Windows are processed in fixed chunks of ``settings.batch_size``, fanned
    out to ``settings.n_jobs`` workers; results come back in input order. A
    window whose descent fails is returned with ``error`` set instead of
    aborting the run. With ``check_flagged`` the windows are rescored and
    any window not above the threshold is rejected; callers holding the
    detector's own predictions may skip this.
    """
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    s = settings or ExplainerSettings()
    X = np.asarray(X, dtype=np.float64)
    prov = list(provenance) if provenance is not None else [None] * len(X)
    if len(X) == 0:
        return []
    if check_flagged:
        scores = tc.anomaly_score(Tensor(X), model(Tensor(X)), per_sample=True).data
        if not (scores > profile.threshold).all():
            raise UsageError("explain_windows only accepts windows the detector flags as anomalous")
    chunks = [(X[i : i + s.batch_size], prov[i : i + s.batch_size]) for i in range(0, len(X), s.batch_size)]
    if s.n_jobs == 1 or len(chunks) == 1:
        parts = [_explain_chunk_safe(model, profile, xc, method, s, pc) for xc, pc in chunks]
    else:
        parts = Parallel(n_jobs=s.n_jobs)(
            delayed(_explain_chunk_safe)(model, profile, xc, method, s, pc) for xc, pc in chunks
        )
    return [e for part in parts for e in part]


# ---------------------------------------------------------------------------
# Record export
# ---------------------------------------------------------------------------

RECORDS_HEADER = "# aecfx explanation records v1"


def _fmt_row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _flags(values) -> str:
    return ",".join(str(int(v)) for v in values)


def write_explanations(explanations: Sequence[Explanation], path, eps: float = 0.005) -> None:
    """Write one block per explanation.

    Each block holds ``key=value`` metadata (provenance, method, lambda,
    threshold, final score, iterations, selected mask, per-feature changed
    flags at significance ``eps``, error) followed by the input window under
    ``[X]`` and the counterfactual under ``[X_cf]``, one comma-separated
    feature row per line.
    """
    lines = [RECORDS_HEADER]
    for i, e in enumerate(explanations):
        f, s = e.provenance if e.provenance is not None else ("", i)
        changed = np.mean(np.abs(e.original - e.counterfactual), axis=1) > eps
        lines += [
            "[record]",
            f"index={i}",
            f"file={f}",
            f"start={s}",
            f"method={e.method}",
            f"lambda={e.lam!r}",
            f"threshold={'' if e.threshold is None else repr(float(e.threshold))}",
            f"final_score={float(e.final_score)!r}",
            f"objective={'' if e.objective is None else repr(float(e.objective))}",
            f"iterations={e.iterations}",
            f"fallback={int(e.mask.fallback)}",
            f"selected={_flags(e.mask.selected)}",
            f"changed={_flags(changed)}",
            f"error={e.error or ''}",
            "[X]",
        ]
        lines += [_fmt_row(r) for r in e.original]
        lines.append("[X_cf]")
        lines += [_fmt_row(r) for r in e.counterfactual]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_explanations(path) -> list[Explanation]:
    """Parse a file written by :func:`write_explanations`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != RECORDS_HEADER:
        raise UsageError(f"{path}: not an explanation records file")
    out: list[Explanation] = []
    meta: dict = {}
    blocks: dict = {}
    current = None

    def flush():
        if not meta:
            return
        sel = np.array([int(v) for v in meta["selected"].split(",")], dtype=bool)
        mask = FeatureMask(sel, fallback=bool(int(meta["fallback"])))
        thr = float(meta["threshold"]) if meta["threshold"] else None
        obj = float(meta["objective"]) if meta["objective"] else None
        out.append(Explanation(
            np.array(blocks["X"]), mask, np.array(blocks["X_cf"]), float(meta["final_score"]),
            int(meta["iterations"]), meta["method"], float(meta["lambda"]), thr, obj,
            (meta["file"], int(meta["start"])), meta["error"] or None,
        ))

    for line in text[1:]:
        if line == "[record]":
            flush()
            meta, blocks, current = {}, {}, "meta"
        elif line in ("[X]", "[X_cf]"):
            current = line[1:-1]
            blocks[current] = []
        elif current == "meta":
            key, _, value = line.partition("=")
            meta[key] = value
        elif current:
            blocks[current].append([float(v) for v in line.split(",")])
    flush()
    return out
