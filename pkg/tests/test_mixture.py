import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, fd_floor, rel_err
from moedepth.mixture import (
    DEFAULT_LAMBDA_D, DEFAULT_LAMBDA_E, GateField, LossConfig, combine, gate_argmax, gate_softmax,
    gating_entropy, hard_limit_check, is_one_hot, mixture_nll, mixture_output, pixel_entropy, total_loss,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def px(*values):
    """(K,) values as a (K, 1, 1) field."""
    return np.array(values, dtype=float).reshape(-1, 1, 1)


def one_hot(sel, k):
    w = np.zeros((k,) + sel.shape)
    np.put_along_axis(w, sel[None], 1.0, axis=0)
    return w


# ---- gate_softmax -----------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(gate_softmax(px(0, 0), 1.0).weights.ravel(), [0.5, 0.5])


def test_softmax_high_precision_oracle():
    w = gate_softmax(px(1, 0), 0.5).weights.ravel()
    e2 = mpmath.e ** 2
    assert w[0] == pytest.approx(float(e2 / (e2 + 1)), abs=1e-15)
    assert w[1] == pytest.approx(float(1 / (e2 + 1)), abs=1e-15)
    assert round(w[0], 4) == 0.8808


def test_softmax_low_temperature_limit():
    w = gate_softmax(px(5, 1, 1), 0.01).weights.ravel()
    np.testing.assert_allclose(w, [1, 0, 0], atol=1e-8)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        gate_softmax(px(1, 2), 0.0)
    with pytest.raises(ValueError):
        gate_softmax(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        gate_softmax(px(np.inf, 0), 1.0)


logit_fields = st.builds(
    lambda k, h, w, seed, scale: np.random.default_rng(seed).normal(scale=scale, size=(k, h, w)),
    st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1), st.sampled_from([0.1, 1.0, 30.0]),
)


@given(logit_fields, st.floats(0.05, 5.0))
def test_weights_are_a_distribution(g, tau):
    w = gate_softmax(g, tau).weights
    assert np.all((w >= 0) & (w <= 1))
    assert np.max(np.abs(w.sum(axis=0) - 1)) < 1e-12


@given(logit_fields, st.floats(-50, 50), st.floats(0.1, 2.0))
def test_softmax_shift_invariance(g, c, tau):
    a = gate_softmax(g, tau).weights
    b = gate_softmax(g + c, tau).weights
    assert np.max(np.abs(a - b)) < 1e-12


# ---- gate_argmax / combine ------------------------------------------------

def test_argmax_examples():
    assert gate_argmax(px(0.2, 0.8)).item() == 1
    assert gate_argmax(px(0.5, 0.5)).item() == 0
    assert gate_argmax(px(0, 0, 1, 0)).item() == 2


def test_combine_arithmetic():
    assert combine(px(4, 8), px(0.25, 0.75)).item() == 7.0


@given(logit_fields, st.integers(0, 2**32 - 1))
def test_combine_one_hot_selects_exactly(g, seed):
    k = g.shape[0]
    mu = np.random.default_rng(seed).normal(size=g.shape)
    sel = np.argmax(g, axis=0)
    w = one_hot(sel, k)
    expect = np.take_along_axis(mu, sel[None], 0)[0]
    assert np.array_equal(combine(mu, w), expect)
    assert np.array_equal(combine(mu, w, hard=True), expect)


@given(logit_fields, st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
def test_fused_depth_in_convex_hull_and_near_hard(g, seed, tau):
    mu = np.random.default_rng(seed).normal(size=g.shape)
    gate = gate_softmax(g, tau)
    soft = combine(mu, gate)
    hard = combine(mu, gate, hard=True)
    assert np.all(soft >= mu.min(axis=0) - 1e-12) and np.all(soft <= mu.max(axis=0) + 1e-12)
    assert np.all(np.abs(soft - hard) <= np.max(np.abs(mu - hard[None]), axis=0) + 1e-12)


def test_soft_converges_to_hard_as_tau_falls(rng):
    g = rng.normal(size=(4, 6, 6))
    mu = rng.normal(size=(4, 6, 6))
    hard = combine(mu, gate_softmax(g, 1.0), hard=True)
    gaps = np.array([np.max(np.abs(combine(mu, gate_softmax(g, t)) - hard)) for t in 0.7 ** np.arange(80)])
    # far from the limit the gap can grow (weights of several losers move at once);
    # once it is small the decay is monotone all the way to zero
    tail = gaps[np.argmax(gaps < 1e-2):]
    assert np.all(np.diff(tail) <= 0)
    for tol in (1e-3, 1e-6, 1e-9, 1e-12):
        assert np.all(gaps[np.argmax(gaps < tol):] < tol)
    assert gaps[-1] == 0.0


# ---- mixture_nll --------------------------------------------------------------

def test_nll_single_expert_at_mode():
    out = mixture_output(np.full((1, 3, 3), 2.0), gate_softmax(np.zeros((1, 3, 3)), 1.0))
    loss, _, _ = mixture_nll(out, np.full((3, 3), 2.0), LossConfig())
    assert loss == pytest.approx(HALF_LOG_2PI, abs=1e-15)
    assert round(loss, 4) == 0.9189


def test_nll_two_component_oracle():
    mpmath.mp.dps = 40
    phi = lambda x: mpmath.exp(-x * x / 2) / mpmath.sqrt(2 * mpmath.pi)
    expect = -mpmath.log(mpmath.mpf("0.5") * phi(0) + mpmath.mpf("0.5") * phi(2))
    out = mixture_output(px(0, 2), gate_softmax(px(0, 0), 1.0))
    loss, _, _ = mixture_nll(out, np.zeros((1, 1)), LossConfig())
    assert loss == pytest.approx(float(expect), abs=1e-14)
    assert round(loss, 4) == 1.4852


def test_nll_is_stable_far_from_every_expert():
    out = mixture_output(px(0.0, 1.0), gate_softmax(px(0, 0), 1.0))
    loss, gmu, glog = mixture_nll(out, np.full((1, 1), 1e4), LossConfig())
    assert np.isfinite(loss) and np.all(np.isfinite(gmu)) and np.all(np.isfinite(glog))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_single_expert_is_plain_gaussian_nll(h, w, seed, sigma):
    r = np.random.default_rng(seed)
    mu, d = r.normal(size=(1, h, w)), r.normal(size=(h, w))
    out = mixture_output(mu, gate_softmax(r.normal(size=(1, h, w)), 1.0))
    loss, _, _ = mixture_nll(out, d, LossConfig(sigma=sigma))
    plain = np.mean((d - mu[0]) ** 2 / (2 * sigma**2) + 0.5 * np.log(2 * np.pi * sigma**2))
    assert abs(loss - plain) < 1e-12


def test_nll_skips_invalid_pixels():
    mu = np.zeros((2, 1, 3))
    gate = gate_softmax(np.zeros((2, 1, 3)), 1.0)
    gt = np.array([[0.0, np.nan, 0.0]])
    loss, gmu, glog = mixture_nll(mixture_output(mu, gate), gt, LossConfig())
    assert loss == pytest.approx(HALF_LOG_2PI)
    assert np.all(gmu[:, 0, 1] == 0) and np.all(glog[:, 0, 1] == 0)
    masked = LossConfig(valid_mask=np.array([[False, False, True]]))
    assert mixture_nll(mixture_output(mu, gate), gt, masked)[0] == pytest.approx(HALF_LOG_2PI)
    with pytest.raises(ValueError):
        mixture_nll(mixture_output(mu, gate), np.full((1, 3), np.nan), LossConfig())


def _fd_check(k, h, w, seed, lam_e, sigma, tau):
    r = np.random.default_rng(seed)
    mu = r.normal(size=(k, h, w))
    g = r.normal(size=(k, h, w))
    d = r.normal(size=(h, w))
    cfg = LossConfig(sigma=sigma, lambda_e=lam_e)

    def f():
        return total_loss(mixture_output(mu, gate_softmax(g, tau)), d, cfg).total

    terms = total_loss(mixture_output(mu, gate_softmax(g, tau)), d, cfg)
    floor = fd_floor(terms.total, 1e-5)
    worst = 0.0
    for arr, grad in ((mu, terms.grad_mu), (g, terms.grad_logits)):
        for idx in range(arr.size):
            worst = max(worst, rel_err(grad.flat[idx], central_diff(f, arr, idx), floor))
    return worst


def test_gradients_random_4x4_k3():
    assert _fd_check(3, 4, 4, 0, 0.0, 1.0, 1.0) < 1e-5


def test_gradients_randomised_trials():
    r = np.random.default_rng(99)
    worst = 0.0
    for trial in range(100):
        k = 1 + trial % 6
        h, w = r.integers(1, 9, size=2)
        worst = max(worst, _fd_check(k, h, w, trial, float(r.choice([0, 1e-4, 0.5])),
                                     float(r.uniform(0.5, 2)), float(r.uniform(0.2, 2))))
    assert worst < 1e-5


# ---- entropy ------------------------------------------------------------------

def test_entropy_uniform_and_one_hot():
    loss, _ = gating_entropy(gate_softmax(np.zeros((4, 3, 3)), 1.0))
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert round(loss, 4) == 1.3863
    w = one_hot(np.array([[0, 3], [2, 1]]), 4)
    assert gating_entropy(GateField.from_weights(w))[0] == 0.0


def test_entropy_gradient_fd(rng):
    g = rng.normal(size=(5, 3, 4))
    loss, grad = gating_entropy(gate_softmax(g, 0.7))
    f = lambda: gating_entropy(gate_softmax(g, 0.7))[0]
    floor = fd_floor(loss, 1e-5)
    worst = max(rel_err(grad.flat[i], central_diff(f, g, i), floor) for i in range(g.size))
    assert worst < 1e-5


@given(logit_fields, st.floats(0.01, 10.0))
def test_entropy_bounds(g, tau):
    gate = gate_softmax(g, tau)
    ent = pixel_entropy(gate)
    k = g.shape[0]
    assert np.all(ent >= -1e-15) and np.all(ent <= math.log(k) + 1e-12)
    assert 0 <= gating_entropy(gate)[0] <= math.log(k) + 1e-12


def test_entropy_empty_mask_is_zero():
    loss, grad = gating_entropy(gate_softmax(np.zeros((2, 2, 2)), 1.0), np.zeros((2, 2), bool))
    assert loss == 0.0 and not grad.any()


# ---- total_loss ---------------------------------------------------------------

def test_total_loss_defaults():
    cfg = LossConfig()
    assert (cfg.sigma, cfg.lambda_d, cfg.lambda_e) == (1.0, DEFAULT_LAMBDA_D, DEFAULT_LAMBDA_E)
    assert (DEFAULT_LAMBDA_D, DEFAULT_LAMBDA_E) == (1.0, 1e-4)


def test_total_loss_zero_entropy_weight_is_nll(rng):
    out = mixture_output(rng.normal(size=(3, 4, 4)), gate_softmax(rng.normal(size=(3, 4, 4)), 0.8))
    d = rng.normal(size=(4, 4))
    nll, gmu, glog = mixture_nll(out, d, LossConfig())
    t = total_loss(out, d, LossConfig(lambda_e=0.0))
    assert t.total == nll
    assert np.array_equal(t.grad_mu, gmu) and np.array_equal(t.grad_logits, glog)


def test_total_loss_entropy_only():
    out = mixture_output(np.ones((4, 2, 2)), gate_softmax(np.zeros((4, 2, 2)), 1.0))
    t = total_loss(out, np.zeros((2, 2)), LossConfig(lambda_d=0.0, lambda_e=0.3))
    assert t.total == pytest.approx(0.3 * math.log(4), abs=1e-15)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(sigma=0)
    with pytest.raises(ValueError):
        LossConfig(lambda_e=-1)


# ---- hard limit -------------------------------------------------------------

def test_hard_limit_single_pixel_unit_error():
    out = mixture_output(px(3.0, 1.0), GateField.from_weights(px(1.0, 0.0)))
    nll, sq = hard_limit_check(out, np.full((1, 1), 2.0), 1.0)
    assert nll == pytest.approx(0.5 + HALF_LOG_2PI, abs=1e-15)
    assert sq == pytest.approx(0.5 + HALF_LOG_2PI, abs=1e-15)


def test_hard_limit_exact_expert():
    out = mixture_output(px(2.0, 5.0), GateField.from_weights(px(0.0, 1.0)))
    nll, _ = hard_limit_check(out, np.full((1, 1), 5.0), 0.5)
    assert nll == pytest.approx(0.5 * math.log(2 * math.pi * 0.25), abs=1e-15)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_hard_limit_identity(k, h, w, seed, sigma):
    r = np.random.default_rng(seed)
    sel = r.integers(0, k, size=(h, w))
    out = mixture_output(r.normal(scale=3, size=(k, h, w)), GateField.from_weights(one_hot(sel, k)))
    nll, sq = hard_limit_check(out, r.normal(scale=3, size=(h, w)), sigma)
    assert abs(nll - sq) < 1e-9


def test_hard_limit_rejects_soft_gate():
    out = mixture_output(px(0, 1), gate_softmax(px(0, 0), 1.0))
    with pytest.raises(ValueError):
        hard_limit_check(out, np.zeros((1, 1)), 1.0)
    assert not is_one_hot(px(0.5, 0.5)) and is_one_hot(px(0, 1))
