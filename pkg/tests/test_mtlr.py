import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsurv import autodiff as ad
from mlsurv import mtlr
from mlsurv.encoding import TargetSequence, TimeGrid, admissible_mask, legal_sequence
from mlsurv.errors import DataError, DimensionError, UsageError


def enumerated_scores(theta, bias, x):
    """Score every legal sequence by brute force: sum_k (theta_k . x + b_k) y_k."""
    K = theta.shape[1] + 1
    logits = x @ theta + bias
    return np.array([float(logits @ legal_sequence(K, i)) for i in range(1, K + 1)])


def random_head(rng, d, K, scale=1.0):
    return rng.normal(size=(d, K - 1)) * scale, rng.normal(size=K - 1) * scale, rng.normal(size=d)


def test_zero_params_give_zero_scores():
    theta, bias = np.zeros((3, 5)), np.zeros(5)
    x = np.array([1.0, -2.0, 3.0])
    assert not mtlr.sequence_scores(theta, bias, x).any()
    assert not mtlr.sequence_scores(theta, bias, x + 7.5).any()


def test_three_interval_example():
    theta, bias, x = np.array([[1.0, -0.5]]), np.zeros(2), np.array([2.0])
    s = mtlr.sequence_scores(theta, bias, x)
    assert s.tolist() == [1.0, -1.0, 0.0]
    curve = mtlr.curve_from_scores(s)
    e = np.exp([1.0, -1.0, 0.0])
    np.testing.assert_allclose(curve.pmf, e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(curve.pmf, [0.665, 0.090, 0.245], atol=1e-3)
    tgt = TargetSequence("exact", 1, 3)
    assert mtlr.loglik_uncensored(theta, bias, x, tgt) == pytest.approx(np.log(e[0] / e.sum()), abs=1e-14)
    assert mtlr.loglik_censored(theta, bias, x, 2) == pytest.approx(np.log((e[1] + e[2]) / e.sum()), abs=1e-14)


def test_scores_match_enumeration():
    rng = np.random.default_rng(0)
    for K in (2, 3, 7, 16):
        theta, bias, x = random_head(rng, 4, K)
        np.testing.assert_allclose(mtlr.sequence_scores(theta, bias, x), enumerated_scores(theta, bias, x),
                                   atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        mtlr.sequence_scores(np.zeros((3, 4)), np.zeros(4), np.zeros(2))
    with pytest.raises(DimensionError):
        mtlr.sequence_scores(np.zeros((3, 4)), np.zeros(3), np.zeros(3))


def test_uniform_model():
    K = 16
    theta, bias, x = np.zeros((2, K - 1)), np.zeros(K - 1), np.ones(2)
    curve = mtlr.pmf(theta, bias, x)
    np.testing.assert_allclose(curve.pmf, 1 / K, atol=1e-15)
    assert mtlr.loglik_uncensored(theta, bias, x, TargetSequence("exact", 5, K)) == pytest.approx(np.log(1 / K))
    theta4, bias4 = np.zeros((2, 3)), np.zeros(3)
    assert mtlr.loglik_censored(theta4, bias4, x, 3) == pytest.approx(np.log(2 / 4), abs=1e-15)


def test_large_score_does_not_overflow():
    p = mtlr.pmf_from_scores(np.array([1000.0, 0.0, -5.0, 0.0]))
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0, 0.0], atol=1e-300)


def test_uncensored_rejects_censored_target():
    with pytest.raises(UsageError):
        mtlr.loglik_uncensored(np.zeros((1, 2)), np.zeros(2), np.ones(1), TargetSequence("censored", 2, 3))


def test_censored_interval_out_of_range():
    with pytest.raises(DataError):
        mtlr.loglik_censored(np.zeros((1, 2)), np.zeros(2), np.ones(1), 4)


@pytest.mark.parametrize("seed", range(100))
def test_pmf_and_likelihood_consistency(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 20))
    theta, bias, x = random_head(rng, int(rng.integers(1, 6)), K, scale=rng.uniform(0.1, 3))
    curve = mtlr.pmf(theta, bias, x)
    assert abs(curve.pmf.sum() - 1.0) <= 1e-12
    assert (curve.pmf > 0).all()
    assert mtlr.loglik_censored(theta, bias, x, 1) == 0.0
    for c in range(1, K + 1):
        assert abs(np.exp(mtlr.loglik_censored(theta, bias, x, c)) - curve.pmf[c - 1:].sum()) <= 1e-12
        exact = mtlr.loglik_uncensored(theta, bias, x, TargetSequence("exact", c, K))
        assert abs(np.exp(exact) - curve.pmf[c - 1]) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_softmax_shift_invariance(K, c, seed):
    s = np.random.default_rng(seed).normal(size=K) * 3
    np.testing.assert_allclose(mtlr.pmf_from_scores(s + c), mtlr.pmf_from_scores(s), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_survival_curve_shape(K, seed):
    curve = mtlr.curve_from_scores(np.random.default_rng(seed).normal(size=K) * 2)
    assert curve.survival[0] == 1.0
    assert np.all(np.diff(curve.survival) <= 1e-15)
    np.testing.assert_allclose(curve.survival[1:], [curve.pmf[k:].sum() for k in range(1, K)], atol=1e-12)


def test_risk_uniform_example():
    grid = TimeGrid((1.0, 2.0, 3.0))
    curve = mtlr.curve_from_scores(np.zeros(4))
    np.testing.assert_allclose(curve.survival, [1.0, 0.75, 0.5, 0.25])
    assert mtlr.risk_score(curve, grid) == pytest.approx(-(0.75 + 0.5 + 0.25))


def test_one_hot_risk_extremes():
    grid = TimeGrid((0.5, 1.0, 2.5, 4.0))
    risks = []
    for i in range(grid.K):
        p = np.zeros(grid.K)
        p[i] = 1.0
        risks.append(mtlr.risk_score(mtlr.PredictedCurve(p, mtlr.survival_from_pmf(p)), grid))
    assert int(np.argmax(risks)) == 0 and int(np.argmin(risks)) == grid.K - 1


@settings(max_examples=80, deadline=None)
@given(st.integers(3, 10), st.integers(0, 2**31 - 1), st.data())
def test_moving_mass_later_lowers_risk(K, seed, data):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(tuple(np.cumsum(rng.uniform(0.1, 2.0, size=K - 1))))
    p = rng.dirichlet(np.ones(K))
    i = data.draw(st.integers(0, K - 2))
    amount = p[i] * data.draw(st.floats(0.05, 1.0))
    q = p.copy()
    q[i] -= amount
    q[i + 1] += amount
    r_p = mtlr.risk_scores(mtlr.survival_from_pmf(p), grid)
    r_q = mtlr.risk_scores(mtlr.survival_from_pmf(q), grid)
    assert r_q < r_p


def test_survival_at_interpolates_and_flattens():
    grid = TimeGrid((1.0, 2.0, 3.0))
    surv = np.array([1.0, 0.75, 0.5, 0.25])
    assert mtlr.survival_at(surv, grid, 1.5) == pytest.approx(0.625)
    assert mtlr.survival_at(surv, grid, 10.0) == pytest.approx(0.25)
    assert mtlr.survival_at(surv[None, None], grid, 0.5).shape == (1, 1)


# ---------------------------------------------------------------- tape loss


def _loss_setup(seed, n=5, d=3, K=4, S=3, beta=0.7, weights=None):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(tuple(np.cumsum(rng.uniform(0.3, 1.0, size=K - 1))))
    feats = rng.normal(size=(n, d))
    times = rng.uniform(0.05, grid.boundaries[-1] * 1.3, size=(n, S))
    events = rng.random((n, S)) < 0.6
    masks = [admissible_mask(grid, times[:, s], events[:, s]) for s in range(S)]
    thetas = [ad.Parameter(rng.normal(size=(d, K - 1))) for _ in range(S)]
    biases = [ad.Parameter(rng.normal(size=K - 1)) for _ in range(S)]
    heads = mtlr.MtlrHeads(thetas, biases, np.ones(S) if weights is None else weights, beta)
    return feats, masks, heads, grid, times, events


def _loss(tape, feats, heads, masks):
    return mtlr.multi_label_loss(tape.input(feats), heads, masks)


def test_loss_matches_per_patient_likelihoods():
    feats, masks, heads, grid, times, events = _loss_setup(1)
    tape = ad.Tape()
    value = float(_loss(tape, feats, heads, masks).data)
    expected = 0.0
    for s in range(heads.S):
        th, b = heads.thetas[s].value, heads.biases[s].value
        lls = []
        for j in range(feats.shape[0]):
            tgt = TargetSequence("exact" if events[j, s] else "censored", grid.interval_index(times[j, s]), grid.K)
            lls.append(mtlr.loglik(th, b, feats[j], tgt))
        expected -= heads.label_weights[s] * np.mean(lls)
        expected += heads.beta / 2 * (th ** 2).sum()
    assert value == pytest.approx(expected, abs=1e-12)


def test_single_label_reduction():
    feats, masks, heads, *_ = _loss_setup(2, S=1)
    th, b = heads.thetas[0].value, heads.biases[0].value
    scores = mtlr.sequence_scores(th, b, feats)
    ll = [np.log(mtlr.pmf_from_scores(scores[j])[masks[0][j]].sum()) for j in range(feats.shape[0])]
    value = float(_loss(ad.Tape(), feats, heads, masks).data)
    assert value == pytest.approx(-np.mean(ll) + heads.beta / 2 * (th ** 2).sum(), abs=1e-12)


def test_label_weight_linearity():
    base = _loss_setup(3, weights=np.array([1.0, 0.0, 1.0]))
    one = _loss_setup(3, weights=np.array([1.0, 1.0, 1.0]))
    two = _loss_setup(3, weights=np.array([1.0, 2.0, 1.0]))
    v0, v1, v2 = (float(_loss(ad.Tape(), f, h, m).data) for f, m, h, *_ in (base, one, two))
    assert v2 - v0 == pytest.approx(2 * (v1 - v0), abs=1e-12)


def test_default_weights_and_beta():
    heads = mtlr.MtlrHeads([ad.Parameter(np.zeros((2, 3)))] * 4, [ad.Parameter(np.zeros(3))] * 4, np.ones(4))
    assert heads.beta == 1.0 and heads.label_weights.tolist() == [1.0] * 4


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    feats, masks, heads, *_ = _loss_setup(10 + seed)
    params = heads.thetas + heads.biases
    err = ad.grad_check_params(lambda tape: _loss(tape, feats, heads, masks), params)
    assert err <= 1e-6


def test_zero_weight_label_only_sees_regularizer():
    feats, masks, heads, *_ = _loss_setup(4, weights=np.array([1.0, 0.0, 1.0]), beta=0.8)
    for p in heads.thetas + heads.biases:
        p.zero_grad()
    tape = ad.Tape()
    tape.backward(_loss(tape, feats, heads, masks))
    assert np.array_equal(heads.thetas[1].grad, 0.8 * heads.thetas[1].value)
    assert not heads.biases[1].grad.any()


def test_missing_target_names_patient_and_label():
    grid = TimeGrid((1.0, 2.0))
    times = np.array([[1.0, 2.0], [1.0, np.nan]])
    with pytest.raises(DataError, match="patient B.*label lffs"):
        mtlr.targets_to_masks(grid, times, np.ones_like(times, bool), ["A", "B"], ["os", "lffs"])


def test_masks_per_label_count():
    with pytest.raises(DataError):
        mtlr.multi_label_loss(ad.Tape().input(np.zeros((2, 1))),
                              mtlr.MtlrHeads([ad.Parameter(np.zeros((1, 2)))], [ad.Parameter(np.zeros(2))], [1.0]),
                              [])
