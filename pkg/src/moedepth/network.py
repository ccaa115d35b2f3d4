"""A small convolutional depth network with a mixture-of-experts output head.

Layout::

    input (C_in, H, W)
      -> encoder: encoder_layers x [conv k x k -> leaky relu]  = features F (C_f, H, W)
      -> expert k: conv(C_f -> C_f) -> leaky relu -> conv(C_f -> 1)   = depth map mu_k
      -> gate:     conv(C_f -> K)                                     = logits G
      -> softmax(G / tau) blends the K depth maps

All convolutions use zero "same" padding and stride 1.  Parameters live in a
single flat float64 vector; backpropagation is written out by hand.

Parameter count, with c = input_channels, f = feature_channels,
k = kernel_size, L = encoder_layers and K = num_experts::

    (c f k^2 + f) + (L - 1)(f^2 k^2 + f)          encoder
    + K (f^2 k^2 + f + f k^2 + 1)                 experts
    + K (f k^2 + 1)                               gate
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .mixture import GateField, MixtureOutput, combine, gate_softmax
from .seeding import derive_rng

LEAK = 0.01
DEFAULT_EXPERT_NOISE = 1e-3

# reserved head variants; only the default post-fusion head is implemented
HEAD_VARIANTS = ("final-block", "pre-fusion", "full-head")


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 3
    feature_channels: int = 16
    num_experts: int = 4
    kernel_size: int = 3
    encoder_layers: int = 2
    seed: int = 0
    expert_noise: float = DEFAULT_EXPERT_NOISE
    depth_bias: float = 0.0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        for name in ("input_channels", "feature_channels", "num_experts", "encoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.expert_noise < 0:
            raise ValueError("expert_noise must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def parameter_count(cfg):
    c, f, k2, n_layers, n_exp = (cfg.input_channels, cfg.feature_channels, cfg.kernel_size**2,
                                 cfg.encoder_layers, cfg.num_experts)
    encoder = (c * f * k2 + f) + (n_layers - 1) * (f * f * k2 + f)
    experts = n_exp * (f * f * k2 + f + f * k2 + 1)
    gate = n_exp * (f * k2 + 1)
    return encoder + experts + gate


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    offset: int
    decay: bool

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.offset + self.size


def _layout(cfg):
    f, k = cfg.feature_channels, cfg.kernel_size
    specs = []
    cin = cfg.input_channels
    for layer in range(cfg.encoder_layers):
        specs.append((f"encoder.{layer}.weight", (f, cin, k, k), True))
        specs.append((f"encoder.{layer}.bias", (f,), False))
        cin = f
    for e in range(cfg.num_experts):
        specs.append((f"expert.{e}.conv1.weight", (f, f, k, k), True))
        specs.append((f"expert.{e}.conv1.bias", (f,), False))
        specs.append((f"expert.{e}.conv2.weight", (1, f, k, k), True))
        specs.append((f"expert.{e}.conv2.bias", (1,), False))
    specs.append(("gate.weight", (cfg.num_experts, f, k, k), True))
    specs.append(("gate.bias", (cfg.num_experts,), False))
    segments, offset = [], 0
    for name, shape, decay in specs:
        seg = Segment(name, shape, offset, decay)
        segments.append(seg)
        offset = seg.stop
    return segments


class ParamStore:
    """Flat parameter and gradient vectors with named, shaped segments.

    ``version`` increases whenever the values change, so forward traces can
    tell whether they are still valid.
    """

    def __init__(self, cfg, values=None):
        self.cfg = cfg
        self.segments = _layout(cfg)
        self.index = {s.name: s for s in self.segments}
        n = self.segments[-1].stop
        self.values = np.zeros(n) if values is None else np.array(values, dtype=np.float64)
        if self.values.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.values.shape}")
        self.grads = np.zeros(n)
        self.decay_mask = np.zeros(n, dtype=bool)
        for s in self.segments:
            self.decay_mask[s.offset:s.stop] = s.decay
        self.version = 0

    def __len__(self):
        return self.values.size

    def value(self, name):
        s = self.index[name]
        return self.values[s.offset:s.stop].reshape(s.shape)

    def grad(self, name):
        s = self.index[name]
        return self.grads[s.offset:s.stop].reshape(s.shape)

    def set(self, name, array):
        s = self.index[name]
        self.values[s.offset:s.stop] = np.asarray(array, dtype=np.float64).reshape(-1)
        self.bump()

    def bump(self):
        self.version += 1

    def zero_grad(self):
        self.grads[:] = 0.0

    def segment_of(self, flat_index):
        for s in self.segments:
            if s.offset <= flat_index < s.stop:
                return s.name
        raise IndexError(flat_index)

    def copy(self):
        other = ParamStore(self.cfg, self.values)
        other.grads[:] = self.grads
        return other


def _uniform_fan_in(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_experts_perturbed(base, num_experts, sigma_init=DEFAULT_EXPERT_NOISE, seed=0):
    """Copy a base expert ``num_experts`` times, adding N(0, sigma_init^2) noise.

    ``base`` maps segment suffixes (``conv1.weight`` ...) to arrays.  Expert
    k's noise comes from a stream keyed by ``(seed, k)``, so a given expert's
    initialisation does not depend on how many experts exist.
    """
    if sigma_init < 0:
        raise ValueError("sigma_init must be nonnegative")
    experts = []
    for k in range(num_experts):
        rng = derive_rng(seed, "expert-noise", k)
        experts.append({name: arr + rng.normal(0.0, sigma_init, size=np.shape(arr)) if sigma_init > 0
                        else np.array(arr, dtype=np.float64, copy=True)
                        for name, arr in base.items()})
    return experts


def init_params(cfg):
    params = ParamStore(cfg)
    f, k = cfg.feature_channels, cfg.kernel_size
    rng = derive_rng(cfg.seed, "encoder-init")
    cin = cfg.input_channels
    for layer in range(cfg.encoder_layers):
        params.set(f"encoder.{layer}.weight", _uniform_fan_in(rng, (f, cin, k, k)))
        cin = f

    base_rng = derive_rng(cfg.seed, "expert-base-init")
    base = {
        "conv1.weight": _uniform_fan_in(base_rng, (f, f, k, k)),
        "conv1.bias": np.zeros(f),
        "conv2.weight": _uniform_fan_in(base_rng, (1, f, k, k)),
        "conv2.bias": np.full(1, cfg.depth_bias),
    }
    for e, expert in enumerate(init_experts_perturbed(base, cfg.num_experts, cfg.expert_noise, cfg.seed)):
        for name, arr in expert.items():
            params.set(f"expert.{e}.{name}", arr)

    gate_rng = derive_rng(cfg.seed, "gate-init")
    params.set("gate.weight", _uniform_fan_in(gate_rng, (cfg.num_experts, f, k, k)))
    params.version = 0
    return params


def _leaky(z):
    return np.maximum(z, LEAK * z)


def _flipped_taps(params, n_exp, f, k):
    """(K, k*k, C_f) second-conv weights with the spatial kernel flipped."""
    taps = [params.value(f"expert.{e}.conv2.weight")[0, :, ::-1, ::-1].reshape(f, k * k).T for e in range(n_exp)]
    return np.stack(taps)


def _leaky_backward(grad, z):
    out = grad * LEAK
    np.copyto(out, grad, where=z > 0)
    return out


@dataclass
class ForwardTrace:
    version: int
    shape: tuple
    encoder_cols: list
    encoder_pre: list
    feature_cols: np.ndarray
    head_weight: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    output: MixtureOutput
    extras: dict = field(default_factory=dict)


def forward(params, inputs, temperature):
    """Run the network on one (C_in, H, W) input at the given gate temperature."""
    cfg = params.cfg
    x = np.asarray(getattr(inputs, "data", inputs), dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != cfg.input_channels:
        raise ValueError(f"expected input with {cfg.input_channels} channels, got shape {x.shape}")
    _, h, w = x.shape
    k, f, n_exp = cfg.kernel_size, cfg.feature_channels, cfg.num_experts
    hw = h * w

    act = x
    enc_cols, enc_pre = [], []
    for layer in range(cfg.encoder_layers):
        cols = kernels.im2col(act, k)
        wmat = params.value(f"encoder.{layer}.weight").reshape(f, -1)
        z = wmat @ cols + params.value(f"encoder.{layer}.bias")[:, None]
        enc_cols.append(cols)
        enc_pre.append(z)
        act = _leaky(z).reshape(f, h, w)

    fcols = kernels.im2col(act, k)
    head_w = np.concatenate(
        [params.value(f"expert.{e}.conv1.weight").reshape(f, -1) for e in range(n_exp)]
        + [params.value("gate.weight").reshape(n_exp, -1)]
    )
    head_b = np.concatenate(
        [params.value(f"expert.{e}.conv1.bias") for e in range(n_exp)] + [params.value("gate.bias")]
    )
    z = head_w @ fcols + head_b[:, None]
    hidden_pre = z[: n_exp * f]
    logits = z[n_exp * f:].reshape(n_exp, h, w)

    hidden = np.maximum(hidden_pre, LEAK * hidden_pre).reshape(n_exp, f, hw)
    # single-output conv as a gather: per-offset channel sums, then shifted adds
    taps = np.matmul(_flipped_taps(params, n_exp, f, k), hidden).reshape(n_exp * k * k, hw)
    mu = kernels.col2im(taps, n_exp, h, w, k).reshape(n_exp, hw)
    mu += np.array([params.value(f"expert.{e}.conv2.bias")[0] for e in range(n_exp)])[:, None]
    mu = mu.reshape(n_exp, h, w)

    gate = gate_softmax(logits, temperature)
    output = MixtureOutput(expert_depths=mu, gate=gate, fused_depth=combine(mu, gate))
    return ForwardTrace(
        version=params.version,
        shape=(h, w),
        encoder_cols=enc_cols,
        encoder_pre=enc_pre,
        feature_cols=fcols,
        head_weight=head_w,
        hidden_pre=hidden_pre,
        hidden=hidden,
        output=output,
    )


def backward(trace, params, grad_mu=None, grad_logits=None, grad_fused=None):
    """Accumulate parameter gradients into ``params.grads``.

    Upstream gradients may be given with respect to the per-expert depth maps
    (``grad_mu``), the gate logits (``grad_logits``) and/or the fused depth
    (``grad_fused``); the latter is chained through the soft combination.
    """
    if trace.version != params.version:
        raise StaleTraceError(
            f"trace was produced at parameter version {trace.version}, params are at {params.version}")
    cfg = params.cfg
    h, w = trace.shape
    hw = h * w
    k, f, n_exp = cfg.kernel_size, cfg.feature_channels, cfg.num_experts
    out = trace.output

    g_mu = np.zeros((n_exp, hw)) if grad_mu is None else np.array(grad_mu, dtype=np.float64).reshape(n_exp, hw)
    g_log = (np.zeros((n_exp, hw)) if grad_logits is None
             else np.array(grad_logits, dtype=np.float64).reshape(n_exp, hw))
    if grad_fused is not None:
        gf = np.asarray(getattr(grad_fused, "data", grad_fused), dtype=np.float64).reshape(1, hw)
        wts = out.gate.weights.reshape(n_exp, hw)
        g_mu += wts * gf
        spread = out.expert_depths.reshape(n_exp, hw) - out.fused_depth.reshape(1, hw)
        g_log += wts * spread * gf / out.gate.temperature

    g_cols = kernels.im2col(g_mu.reshape(n_exp, h, w), k).reshape(n_exp, k * k, hw)
    # flipped taps: row (i, j) of g_cols pairs with kernel entry (k-1-i, k-1-j)
    d_taps = np.matmul(trace.hidden, g_cols.transpose(0, 2, 1))
    d_hidden = np.matmul(_flipped_taps(params, n_exp, f, k).transpose(0, 2, 1), g_cols)
    for e in range(n_exp):
        params.grad(f"expert.{e}.conv2.weight")[...] += d_taps[e].reshape(f, k, k)[:, ::-1, ::-1][None]
        params.grad(f"expert.{e}.conv2.bias")[...] += g_mu[e].sum()
    d_hidden = _leaky_backward(d_hidden.reshape(n_exp * f, hw), trace.hidden_pre)

    d_head = np.concatenate([d_hidden, g_log])
    gw = d_head @ trace.feature_cols.T
    gb = d_head.sum(axis=1)
    for e in range(n_exp):
        rows = slice(e * f, (e + 1) * f)
        params.grad(f"expert.{e}.conv1.weight")[...] += gw[rows].reshape(f, f, k, k)
        params.grad(f"expert.{e}.conv1.bias")[...] += gb[rows]
    params.grad("gate.weight")[...] += gw[n_exp * f:].reshape(n_exp, f, k, k)
    params.grad("gate.bias")[...] += gb[n_exp * f:]

    d_act = kernels.col2im(trace.head_weight.T @ d_head, f, h, w, k).reshape(f, hw)
    for layer in reversed(range(cfg.encoder_layers)):
        dz = _leaky_backward(d_act, trace.encoder_pre[layer])
        wname = f"encoder.{layer}.weight"
        wshape = params.index[wname].shape
        params.grad(wname)[...] += (dz @ trace.encoder_cols[layer].T).reshape(wshape)
        params.grad(f"encoder.{layer}.bias")[...] += dz.sum(axis=1)
        if layer > 0:
            wmat = params.value(wname).reshape(f, -1)
            d_act = kernels.col2im(wmat.T @ dz, wshape[1], h, w, k).reshape(wshape[1], hw)


def predict(params, inputs, temperature, hard=False):
    """Forward pass returning the mixture output; ``hard`` selects the argmax expert per pixel."""
    out = forward(params, inputs, temperature).output
    if hard:
        out = MixtureOutput(out.expert_depths, out.gate, combine(out.expert_depths, out.gate, hard=True))
    return out


@dataclass
class Annealer:
    """Per-step exponential temperature decay with a floor."""

    tau: float = 1.0
    decay: float = 0.995
    floor: float = 0.1

    def step(self):
        self.tau = max(self.tau * self.decay, self.floor)
        return self.tau


def temperature_step(annealer):
    return annealer.step()


def steps_to_floor(tau0=1.0, decay=0.995, floor=0.1):
    """First step count n at which the iterated schedule sits on its floor."""
    a = Annealer(tau0, decay, floor)
    n = 0
    while a.tau > floor:
        a.step()
        n += 1
    return n


CHECKPOINT_MAGIC = b"MDC1"
_CONFIG_INT_FIELDS = ("input_channels", "feature_channels", "num_experts", "kernel_size", "encoder_layers", "seed")


def save_checkpoint(path, params, **extra_ints):
    """``MDC1`` checkpoint: magic, named int64 config fields, u64 count, f64 LE parameters.

    Float settings are stored bit-cast into int64 fields whose names end in
    ``_bits``.
    """
    cfg = params.cfg
    items = [(name, int(getattr(cfg, name))) for name in _CONFIG_INT_FIELDS]
    items.append(("expert_noise_bits", _f2i(cfg.expert_noise)))
    items.append(("depth_bias_bits", _f2i(cfg.depth_bias)))
    items.extend((name, int(v)) for name, v in sorted(extra_ints.items()))
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(items))
    for name, value in items:
        raw = name.encode("ascii")
        if value >= 2**63:
            value -= 2**64
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<q", value)
    buf += struct.pack("<Q", len(params))
    buf += params.values.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Returns ``(params, extra)`` where ``extra`` holds the non-config integer fields."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MDC1 checkpoint")
    pos = 4
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    fields_ = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("ascii")
        pos += n
        (value,) = struct.unpack_from("<q", raw, pos)
        pos += 8
        fields_[name] = value
    (n_params,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) - pos != 8 * n_params:
        raise ValueError(f"{path}: expected {8 * n_params} parameter bytes, found {len(raw) - pos}")
    values = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    kwargs = {name: fields_.pop(name) for name in _CONFIG_INT_FIELDS}
    kwargs["seed"] %= 2**64
    kwargs["expert_noise"] = _i2f(fields_.pop("expert_noise_bits"))
    kwargs["depth_bias"] = _i2f(fields_.pop("depth_bias_bits"))
    cfg = NetConfig(**kwargs)
    return ParamStore(cfg, values), fields_


def _f2i(x):
    return struct.unpack("<q", struct.pack("<d", float(x)))[0]


def _i2f(i):
    return struct.unpack("<d", struct.pack("<q", int(i)))[0]


def config_fields():
    return [f.name for f in fields(NetConfig)]
