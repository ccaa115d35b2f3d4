import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_floor, rel_err
from moedepth.mixture import LossConfig, total_loss
from moedepth.network import (
    Annealer, NetConfig, ParamStore, StaleTraceError, backward, forward, init_experts_perturbed, init_params,
    load_checkpoint, parameter_count, predict, save_checkpoint, steps_to_floor, temperature_step,
)


def perturbed(cfg, seed=0, scale=0.3):
    p = init_params(cfg)
    p.values += np.random.default_rng(seed).normal(0, scale, len(p))
    p.bump()
    return p


def segment_fd_errors(cfg, probes=20, tau=0.7, lam_e=0.1, seed=0, size=6):
    """Worst relative error per segment between backprop and central differences of the full loss."""
    r = np.random.default_rng(seed)
    p = perturbed(cfg, seed)
    x = r.normal(size=(cfg.input_channels, size, size))
    gt = r.uniform(1, 3, (size, size))
    lc = LossConfig(lambda_e=lam_e)

    def loss():
        p.bump()
        return total_loss(forward(p, x, tau).output, gt, lc).total

    tr = forward(p, x, tau)
    t = total_loss(tr.output, gt, lc)
    p.zero_grad()
    backward(tr, p, grad_mu=t.grad_mu, grad_logits=t.grad_logits)
    grads = p.grads.copy()
    floor = fd_floor(t.total, 1e-4)
    worst = {}
    for seg in p.segments:
        idx = r.choice(seg.size, size=min(probes, seg.size), replace=False) + seg.offset
        errs = []
        for i in idx:
            v = p.values[i]
            p.values[i] = v + 1e-6
            a = loss()
            p.values[i] = v - 1e-6
            b = loss()
            p.values[i] = v
            errs.append(rel_err(grads[i], (a - b) / 2e-6, floor))
        worst[seg.name] = max(errs)
    return worst


def small(k, **kw):
    return NetConfig(input_channels=3, feature_channels=4, num_experts=k, seed=3, expert_noise=0.1, **kw)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_backward_matches_fd_per_segment(k):
    worst = segment_fd_errors(small(k))
    assert max(worst.values()) < 1e-4, worst


def test_backward_fd_all_params_k3():
    cfg = NetConfig(input_channels=2, feature_channels=3, num_experts=3, seed=5, expert_noise=0.1)
    worst = segment_fd_errors(cfg, probes=10**6, seed=2)
    assert max(worst.values()) < 1e-4, worst


def test_backward_fd_deeper_wider_kernel():
    cfg = NetConfig(input_channels=1, feature_channels=3, num_experts=2, kernel_size=5, encoder_layers=3, seed=1)
    assert max(segment_fd_errors(cfg, probes=8, size=7).values()) < 1e-4


def test_grad_fused_path_matches_fd(rng):
    cfg = small(3)
    p = perturbed(cfg, 4)
    x = rng.normal(size=(3, 5, 5))
    gt = rng.normal(size=(5, 5))

    def loss():
        p.bump()
        return 0.5 * np.sum((forward(p, x, 0.8).output.fused_depth - gt) ** 2)

    tr = forward(p, x, 0.8)
    p.zero_grad()
    backward(tr, p, grad_fused=tr.output.fused_depth - gt)
    floor = fd_floor(loss(), 1e-4)
    for i in rng.choice(len(p), 60, replace=False):
        v = p.values[i]
        p.values[i] = v + 1e-6
        a = loss()
        p.values[i] = v - 1e-6
        b = loss()
        p.values[i] = v
        assert rel_err(p.grads[i], (a - b) / 2e-6, floor) < 1e-4


def test_zero_input_zero_bias_gives_zero_output():
    p = init_params(NetConfig(seed=2))
    for s in p.segments:
        if s.name.endswith("bias"):
            p.set(s.name, np.zeros(s.shape))
    out = forward(p, np.zeros((3, 8, 8)), 1.0).output
    assert not out.expert_depths.any() and not out.gate.logits.any() and not out.fused_depth.any()
    np.testing.assert_array_equal(out.gate.weights, 0.25)


def test_single_expert_fused_equals_expert(rng):
    p = perturbed(NetConfig(num_experts=1, feature_channels=5))
    out = forward(p, rng.normal(size=(3, 9, 7)), 0.3).output
    assert np.array_equal(out.fused_depth, out.expert_depths[0])


@given(st.integers(1, 5), st.integers(1, 12), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(1, 6))
def test_parameter_count_closed_form(c, f, k, layers, n_exp):
    cfg = NetConfig(input_channels=c, feature_channels=f, kernel_size=k, encoder_layers=layers, num_experts=n_exp)
    assert len(init_params(cfg)) == parameter_count(cfg)
    wide = NetConfig(input_channels=c, feature_channels=2 * f, kernel_size=k, encoder_layers=layers, num_experts=n_exp)
    k2 = k * k
    delta = (c * f * k2 + f) + (layers - 1) * (3 * f * f * k2 + f) + n_exp * (3 * f * f * k2 + f + f * k2 + f * k2)
    assert parameter_count(wide) - parameter_count(cfg) == delta


def test_default_parameter_count():
    assert parameter_count(NetConfig()) == 13208


@given(st.integers(1, 13), st.integers(1, 13))
def test_same_padding_keeps_shape(h, w):
    p = init_params(NetConfig(feature_channels=3, num_experts=2))
    out = forward(p, np.ones((3, h, w)), 1.0).output
    assert out.expert_depths.shape == (2, h, w) and out.fused_depth.shape == (h, w)


def test_zero_noise_experts_identical(rng):
    base = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=4)}
    experts = init_experts_perturbed(base, 3, 0.0, seed=9)
    for e in experts:
        assert all(np.array_equal(e[n], base[n]) for n in base)
    p = init_params(NetConfig(expert_noise=0.0, seed=4))
    p.values += rng.normal(0, 0.1, len(p)) * ~np.char.startswith([p.segment_of(i) for i in range(len(p))], "expert")
    p.bump()
    x = rng.normal(size=(3, 8, 8))
    a = forward(p, x, 1.0).output
    p.set("gate.bias", [5.0, -2.0, 0.0, 1.0])
    b = forward(p, x, 1.0).output
    assert np.max(np.abs(a.expert_depths - a.expert_depths[0])) < 1e-12
    assert np.max(np.abs(a.fused_depth - b.fused_depth)) < 1e-12


def test_expert_noise_std():
    base = {"w": np.zeros((100, 60))}
    experts = init_experts_perturbed(base, 4, 1e-3, seed=0)
    devs = np.concatenate([e["w"].ravel() for e in experts])
    assert devs.size >= 10**4
    assert abs(devs.std() / 1e-3 - 1) < 0.2
    cfg = NetConfig(seed=0)
    p = init_params(cfg)
    w = np.stack([p.value(f"expert.{e}.conv1.weight") for e in range(4)])
    assert abs((w - w.mean(axis=0)).std() * np.sqrt(4 / 3) / 1e-3 - 1) < 0.2


def test_init_deterministic_and_seed_sensitive():
    a, b = init_params(NetConfig(seed=7)), init_params(NetConfig(seed=7))
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, init_params(NetConfig(seed=8)).values)
    base = {"w": np.zeros(5)}
    assert np.array_equal(init_experts_perturbed(base, 2, 0.1, 1)[1]["w"], init_experts_perturbed(base, 2, 0.1, 1)[1]["w"])
    assert not np.array_equal(init_experts_perturbed(base, 2, 0.1, 1)[1]["w"], init_experts_perturbed(base, 2, 0.1, 2)[1]["w"])


def test_bias_init_and_decay_mask():
    p = init_params(NetConfig(depth_bias=2.5))
    for s in p.segments:
        assert p.decay_mask[s.offset:s.stop].all() == s.name.endswith("weight")
        if s.name.endswith("conv2.bias"):
            assert np.all(np.abs(p.value(s.name) - 2.5) < 0.01)
        elif s.name.startswith("expert") and s.name.endswith("bias"):
            assert np.all(np.abs(p.value(s.name)) < 0.01)  # perturbation only
        elif s.name.endswith("bias"):
            assert not p.value(s.name).any()
    q = init_params(NetConfig(depth_bias=2.5, expert_noise=0.0))
    assert all(q.value(f"expert.{e}.conv2.bias")[0] == 2.5 for e in range(4))


def test_backward_linearity(rng):
    p = perturbed(small(2))
    x = rng.normal(size=(3, 5, 5))
    tr = forward(p, x, 1.0)
    p.zero_grad()
    backward(tr, p)
    assert not p.grads.any()
    gm, gl = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
    backward(tr, p, grad_mu=gm, grad_logits=gl)
    once = p.grads.copy()
    backward(tr, p, grad_mu=gm, grad_logits=gl)
    assert np.array_equal(p.grads, 2 * once)


def test_stale_trace_rejected(rng):
    p = init_params(small(2))
    tr = forward(p, rng.normal(size=(3, 4, 4)), 1.0)
    p.set("gate.bias", [1.0, 0.0])
    with pytest.raises(StaleTraceError):
        backward(tr, p)


def test_forward_validates_input():
    with pytest.raises(ValueError):
        forward(init_params(small(2)), np.zeros((2, 4, 4)), 1.0)
    with pytest.raises(ValueError):
        NetConfig(kernel_size=2)


def test_predict_hard(rng):
    p = perturbed(small(3))
    x = rng.normal(size=(3, 6, 6))
    out = predict(p, x, 0.5, hard=True)
    sel = np.argmax(out.gate.weights, axis=0)
    assert np.array_equal(out.fused_depth, np.take_along_axis(out.expert_depths, sel[None], 0)[0])


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetConfig(feature_channels=5, num_experts=3, seed=2**64 - 5, expert_noise=0.02, depth_bias=-1.5)
    p = perturbed(cfg)
    save_checkpoint(tmp_path / "m.mdc", p, steps=17, tau_bits=-3)
    q, extra = load_checkpoint(tmp_path / "m.mdc")
    assert q.cfg == cfg and extra == {"steps": 17, "tau_bits": -3}
    assert q.values.tobytes() == p.values.tobytes()
    save_checkpoint(tmp_path / "n.mdc", q, steps=17, tau_bits=-3)
    assert (tmp_path / "m.mdc").read_bytes() == (tmp_path / "n.mdc").read_bytes()
    raw = (tmp_path / "m.mdc").read_bytes()
    (tmp_path / "bad.mdc").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.mdc")


def test_param_store_copy_and_lookup():
    p = init_params(small(2))
    q = p.copy()
    q.values[0] += 1
    assert p.values[0] != q.values[0]
    assert p.segment_of(0) == "encoder.0.weight"
    assert p.segment_of(len(p) - 1) == "gate.bias"
    with pytest.raises(ValueError):
        ParamStore(p.cfg, np.zeros(3))


def test_temperature_schedule():
    a = Annealer()
    assert temperature_step(a) == 0.995
    floor = Annealer(tau=0.1)
    assert temperature_step(floor) == 0.1
    assert steps_to_floor() == 460
    taus = [Annealer().tau]
    a = Annealer()
    for _ in range(500):
        taus.append(temperature_step(a))
    assert taus[459] > 0.1 and taus[460] == 0.1
