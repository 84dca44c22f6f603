import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aecfx import tensorcore as tc
from aecfx.autoencoder import build_model
from aecfx.detector import DetectorProfile
from aecfx.exceptions import NonFiniteError, UsageError
from aecfx.explainer import (
    ExplainerSettings,
    FeatureMask,
    descend,
    element_scores,
    explain_counterfactual,
    explain_counterfactual_full,
    explain_reconstruction,
    explain_windows,
    read_explanations,
    select_features,
    write_explanations,
)
from aecfx.tensorcore import Tensor


class Identity:
    def __call__(self, x):
        return x


class Constant:
    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return Tensor(np.full(x.shape, self.value))


class Shrink:
    """Reconstruction ``0.5 * x``: the score grows with |x|."""

    def __call__(self, x):
        return tc.scale(x, 0.5)


class Poisoned(Shrink):
    """Fails on any window holding a value above 100."""

    def __call__(self, x):
        if (x.data > 100).any():
            raise NonFiniteError("poisoned window")
        return super().__call__(x)


ZERO = DetectorProfile(threshold=0.0, mean=0.0, std=0.0, k=0.0)


# -- feature selection ---------------------------------------------------------


def test_uniform_scores_select_everything():
    mask = select_features(np.ones((3, 10)))
    assert mask.selected.all() and not mask.fallback


def test_one_dominant_feature():
    asw = np.vstack([np.full(10, 10.0), np.full(10, 0.01)])
    np.testing.assert_array_equal(select_features(asw).selected, [True, False])


def test_all_zero_falls_back_to_first_feature():
    mask = select_features(np.zeros((4, 6)))
    assert mask.fallback
    assert mask.indices == [0]


def test_duration_rule_is_strict():
    # feature 1 exceeds the level at exactly 9 of 10 steps: not more than 90%
    asw = np.vstack([np.full(10, 1.0), np.r_[np.full(9, 1.0), 0.0]])
    np.testing.assert_array_equal(select_features(asw).selected, [True, False])


def test_select_rejects_wrong_rank():
    with pytest.raises(UsageError):
        select_features(np.ones(5))


@given(arrays(np.float64, (4, 12), elements=st.floats(0, 10)), st.permutations(range(4)))
def test_selection_commutes_with_feature_permutation(asw, perm):
    a = select_features(asw)
    b = select_features(asw[list(perm)])
    if not a.fallback:
        np.testing.assert_array_equal(b.selected, a.selected[list(perm)])


def test_mask_needs_a_feature():
    with pytest.raises(UsageError):
        FeatureMask(np.zeros(3, dtype=bool))


def test_element_scores_match_asw():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(element_scores(Constant(0.0), X), X**2 + X, rtol=0, atol=0)


# -- descent -------------------------------------------------------------------


def test_identity_model_is_a_fixed_point():
    X = np.random.default_rng(0).normal(size=(2, 8))
    e = explain_counterfactual(Identity(), ZERO, X, FeatureMask.all(2), max_iters=20, require_anomalous=False)
    assert np.array_equal(e.counterfactual, X)
    assert e.final_score == 0.0


@pytest.mark.parametrize("eta,steps", [(0.1, 100), (0.05, 37), (0.2, 5)])
def test_quadratic_contraction(eta, steps):
    # cost (x' - 5)^2 on a single element; x_i = 5 (1 - (1 - 2 eta)^i)
    best, iters, obj = descend(
        Constant(5.0), np.zeros((1, 1, 1)), np.ones((1, 1), bool), 0.0, eta, steps,
        cost=tc.mean_squared_error,
    )
    expected = 5.0 * (1.0 - (1.0 - 2.0 * eta) ** steps)
    assert best[0, 0, 0] == pytest.approx(expected, rel=1e-12)
    assert obj[0] == pytest.approx((expected - 5.0) ** 2, rel=1e-9)


def test_quadratic_converges_within_hundred_steps():
    best, _, _ = descend(
        Constant(5.0), np.zeros((1, 1, 1)), np.ones((1, 1), bool), 0.0, 0.1, 100,
        cost=tc.mean_squared_error,
    )
    assert abs(best[0, 0, 0] - 5.0) < 1e-4


def test_best_iterate_is_returned():
    # eta 0.75 overshoots: x_1 = 7.5, x_2 = 3.75; the best of {0, 7.5, 3.75} is 3.75
    best, _, obj = descend(
        Constant(5.0), np.zeros((1, 1, 1)), np.ones((1, 1), bool), 0.0, 0.75, 2,
        cost=tc.mean_squared_error,
    )
    assert best[0, 0, 0] == 3.75 and obj[0] == 1.25**2


def test_early_stop_returns_first_iterate_below_threshold():
    best, iters, _ = descend(
        Constant(5.0), np.zeros((1, 1, 1)), np.ones((1, 1), bool), 0.0, 0.1, 100,
        threshold=1.0, early_stop=True, cost=tc.mean_squared_error,
    )
    # (5 * 0.8^i)^2 < 1 first at i = 8
    assert iters[0] == 8
    assert best[0, 0, 0] == pytest.approx(5.0 * (1 - 0.8**8))
    with pytest.raises(UsageError):
        descend(Constant(5.0), np.zeros((1, 1, 1)), np.ones((1, 1), bool), 0.0, 0.1, 3, early_stop=True)


def test_non_finite_descent_names_iteration():
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError, match="iteration"):
            descend(Shrink(), np.ones((1, 2, 3)), np.ones((1, 2), bool), 0.0, 1e308, 5)


def test_masking_is_bitwise_exact_on_random_stubs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, length = rng.integers(2, 6), rng.integers(3, 9)
        X = rng.normal(size=(n, length)) + 2.0
        sel = rng.random(n) < 0.5
        sel[rng.integers(n)] = True
        mask = FeatureMask(sel)
        lam = float(rng.choice([0.0, 0.5]))
        e = explain_counterfactual(Shrink(), ZERO, X, mask, lam=lam, eta=0.05, max_iters=30)
        assert np.array_equal(e.counterfactual[~sel], X[~sel])
        assert not np.array_equal(e.counterfactual[sel], X[sel])


def test_masking_exact_on_small_autoencoder():
    model = build_model("skab", 3, 16, seed=0, filters=(4, 2), latent=2)
    X = np.random.default_rng(1).random((3, 16)) * 3
    profile = DetectorProfile(0.0, 0.0, 0.0, 0.0)
    e = explain_counterfactual(model, profile, X, FeatureMask(np.array([False, True, False])), eta=0.05, max_iters=20)
    assert np.array_equal(e.counterfactual[[0, 2]], X[[0, 2]])
    assert e.final_score < tc.anomaly_score(Tensor(X), model(Tensor(X))).item()


def test_full_equals_mask_all_with_unit_weight():
    X = np.random.default_rng(2).normal(size=(3, 5)) + 1
    a = explain_counterfactual_full(Shrink(), ZERO, X, eta=0.05, max_iters=25)
    b = explain_counterfactual(Shrink(), ZERO, X, FeatureMask.all(3), lam=1.0, eta=0.05, max_iters=25)
    assert a.counterfactual.tobytes() == b.counterfactual.tobytes()
    assert a.method == "counterfactual" and a.lam == 1.0


def test_distance_weight_keeps_counterfactual_closer():
    X = np.full((2, 4), 3.0)
    free = explain_counterfactual(Shrink(), ZERO, X, FeatureMask.all(2), lam=0.0, eta=0.1, max_iters=50)
    held = explain_counterfactual(Shrink(), ZERO, X, FeatureMask.all(2), lam=5.0, eta=0.1, max_iters=50)
    assert np.abs(held.counterfactual - X).mean() < np.abs(free.counterfactual - X).mean()


def test_rejects_normal_window_and_bad_mask():
    with pytest.raises(UsageError, match="not anomalous"):
        explain_counterfactual(Shrink(), DetectorProfile(10.0, 0, 0, 0), np.ones((2, 3)), FeatureMask.all(2))
    with pytest.raises(UsageError, match="mask"):
        explain_counterfactual(Shrink(), ZERO, np.ones((2, 3)), FeatureMask.all(3))


def test_reconstruction_of_perfect_stub():
    X = np.random.default_rng(4).random((2, 6))
    e = explain_reconstruction(Identity(), X)
    assert np.array_equal(e.counterfactual, X) and e.final_score == 0.0


def test_reconstruction_returns_model_output():
    X = np.ones((2, 3))
    e = explain_reconstruction(Shrink(), X, ZERO)
    np.testing.assert_array_equal(e.counterfactual, 0.5 * X)
    assert e.threshold == 0.0


# -- batch driver --------------------------------------------------------------


def batch(rng, count=7):
    return rng.normal(size=(count, 3, 6)) + 2.0


@pytest.mark.parametrize("method", ["ours", "counterfactual", "reconstruction"])
def test_batch_matches_single_window_runs(method):
    X = batch(np.random.default_rng(5))
    s = ExplainerSettings(eta=0.05, max_iters=15, batch_size=3)
    out = explain_windows(Shrink(), ZERO, X, method, s, provenance=[("f", i) for i in range(len(X))])
    assert [e.provenance for e in out] == [("f", i) for i in range(len(X))]
    for x, e in zip(X, out):
        if method == "ours":
            ref = explain_counterfactual(Shrink(), ZERO, x, select_features(element_scores(Shrink(), x)), eta=0.05, max_iters=15)
        elif method == "counterfactual":
            ref = explain_counterfactual_full(Shrink(), ZERO, x, eta=0.05, max_iters=15)
        else:
            ref = explain_reconstruction(Shrink(), x)
        np.testing.assert_allclose(e.counterfactual, ref.counterfactual, rtol=1e-13, atol=1e-15)
        np.testing.assert_array_equal(e.mask.selected, ref.mask.selected)


def test_parallel_equals_serial():
    X = batch(np.random.default_rng(6), 9)
    serial = explain_windows(Shrink(), ZERO, X, "ours", ExplainerSettings(eta=0.05, max_iters=10, batch_size=2))
    par = explain_windows(Shrink(), ZERO, X, "ours", ExplainerSettings(eta=0.05, max_iters=10, batch_size=2, n_jobs=2))
    for a, b in zip(serial, par):
        assert a.counterfactual.tobytes() == b.counterfactual.tobytes()


def test_failing_window_is_isolated():
    X = batch(np.random.default_rng(7), 4)
    X[2, 0, 0] = 500.0
    out = explain_windows(Poisoned(), ZERO, X, "counterfactual", ExplainerSettings(eta=0.01, max_iters=5), check_flagged=False)
    assert [e.error is None for e in out] == [True, True, False, True]
    assert "poisoned" in out[2].error


def test_rejects_unflagged_windows():
    X = np.zeros((2, 3, 6))
    X[0] += 1
    with pytest.raises(UsageError, match="flags"):
        explain_windows(Shrink(), ZERO, X, "ours")
    with pytest.raises(UsageError, match="unknown method"):
        explain_windows(Shrink(), ZERO, X, "magic")
    assert explain_windows(Shrink(), ZERO, np.zeros((0, 3, 6))) == []


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ours_never_touches_unselected_rows(seed):
    X = batch(np.random.default_rng(seed), 3)
    for e in explain_windows(Shrink(), ZERO, X, "ours", ExplainerSettings(eta=0.05, max_iters=8)):
        assert np.array_equal(e.counterfactual[~e.mask.selected], e.original[~e.mask.selected])


def test_records_round_trip(tmp_path):
    X = batch(np.random.default_rng(8), 3)
    out = explain_windows(Shrink(), ZERO, X, "ours", ExplainerSettings(eta=0.05, max_iters=5),
                          provenance=[("a.csv", 4 * i) for i in range(3)])
    path = tmp_path / "records.txt"
    write_explanations(out, path)
    back = read_explanations(path)
    assert len(back) == 3
    for a, b in zip(out, back):
        assert a.original.tobytes() == b.original.tobytes()
        assert a.counterfactual.tobytes() == b.counterfactual.tobytes()
        np.testing.assert_array_equal(a.mask.selected, b.mask.selected)
        assert (a.provenance, a.final_score, a.iterations, a.method) == (b.provenance, b.final_score, b.iterations, b.method)
    (tmp_path / "junk.txt").write_text("hello\n")
    with pytest.raises(UsageError):
        read_explanations(tmp_path / "junk.txt")
