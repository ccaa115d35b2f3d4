"""Per-pixel gating, mixture combination and the mixture training losses.

Arrays follow the (K, H, W) layout for per-expert fields and (H, W) for
single fields.  Every loss returns exact analytic gradients with respect to
the expert means and the gate logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_SIGMA = 1.0
DEFAULT_LAMBDA_D = 1.0
DEFAULT_LAMBDA_E = 1e-4


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _log_softmax(z):
    zmax = np.max(z, axis=0, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


@dataclass
class GateField:
    """Gate logits, the softmax temperature and the resulting mixture weights."""

    logits: np.ndarray
    temperature: float
    weights: np.ndarray
    log_weights: np.ndarray

    @classmethod
    def from_weights(cls, weights):
        """Gate whose logits are ``log(weights)`` at unit temperature (allows exact one-hot gates)."""
        w = _arr(weights)
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        return cls(logits=logw, temperature=1.0, weights=w.copy(), log_weights=logw.copy())

    @property
    def num_experts(self):
        return self.weights.shape[0]


@dataclass
class MixtureOutput:
    expert_depths: np.ndarray
    gate: GateField
    fused_depth: np.ndarray


@dataclass
class LossConfig:
    sigma: float = DEFAULT_SIGMA
    lambda_d: float = DEFAULT_LAMBDA_D
    lambda_e: float = DEFAULT_LAMBDA_E
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.lambda_d < 0 or self.lambda_e < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossTerms:
    """Value and gradients of the combined objective plus its components."""

    total: float
    nll: float
    entropy: float
    grad_mu: np.ndarray
    grad_logits: np.ndarray


def gate_softmax(logits, temperature):
    """Temperature-scaled softmax over the expert axis, computed with the max subtracted."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    g = _arr(logits)
    if g.ndim != 3:
        raise ValueError(f"logits must have shape (K, H, W), got {g.shape}")
    if not np.isfinite(g).all():
        raise ValueError("logits must be finite")
    logw = _log_softmax(g / temperature)
    return GateField(logits=g, temperature=float(temperature), weights=np.exp(logw), log_weights=logw)


def gate_argmax(gate):
    """Index of the dominant expert per pixel; ties resolve to the lowest index."""
    w = gate.weights if isinstance(gate, GateField) else _arr(gate)
    return np.argmax(w, axis=0)


def combine(expert_depths, gate, hard=False):
    mu = _arr(expert_depths)
    w = gate.weights if isinstance(gate, GateField) else _arr(gate)
    if mu.shape != w.shape:
        raise ValueError(f"expert depths {mu.shape} do not match gate weights {w.shape}")
    if hard:
        sel = np.argmax(w, axis=0)
        return np.take_along_axis(mu, sel[None], axis=0)[0]
    return np.sum(w * mu, axis=0)


def mixture_output(expert_depths, gate, hard=False):
    mu = _arr(expert_depths)
    return MixtureOutput(expert_depths=mu, gate=gate, fused_depth=combine(mu, gate, hard=hard))


def _valid_pixels(gt, mask):
    valid = np.isfinite(gt)
    if mask is not None:
        m = np.asarray(getattr(mask, "data", mask), dtype=bool)
        if m.shape != gt.shape:
            raise ValueError(f"valid mask {m.shape} does not match ground truth {gt.shape}")
        valid &= m
    return valid


def mixture_nll(output, gt_depth, cfg):
    """Mean negative log-likelihood of the ground truth under the per-pixel Gaussian mixture.

    Returns ``(loss, grad_mu, grad_logits)``.  The log-sum over experts is
    evaluated around the largest component so far-off experts cannot
    underflow the density to zero.
    """
    mu = output.expert_depths
    gate = output.gate
    gt = _arr(gt_depth)
    if gt.shape != mu.shape[1:]:
        raise ValueError(f"ground truth {gt.shape} does not match expert maps {mu.shape[1:]}")
    valid = _valid_pixels(gt, cfg.valid_mask)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("mixture_nll needs at least one valid pixel")

    sigma2 = cfg.sigma * cfg.sigma
    d = np.where(valid, gt, 0.0)
    resid = d[None] - mu
    log_comp = gate.log_weights - 0.5 * (LOG_2PI + math.log(sigma2)) - resid * resid / (2.0 * sigma2)
    amax = np.max(log_comp, axis=0)
    shifted = np.exp(log_comp - amax[None])
    total = np.sum(shifted, axis=0)
    log_lik = amax + np.log(total)
    resp = shifted / total[None]

    loss = -float(np.sum(log_lik[valid])) / n
    scale = valid / n
    grad_mu = scale[None] * resp * (mu - d[None]) / sigma2
    grad_logits = scale[None] * (gate.weights - resp) / gate.temperature
    return loss, grad_mu, grad_logits


def pixel_entropy(gate):
    """Per-pixel Shannon entropy of the gate distribution (0 log 0 taken as 0)."""
    w = gate.weights
    plogp = np.zeros_like(w)
    np.multiply(w, gate.log_weights, out=plogp, where=w > 0)
    return -np.sum(plogp, axis=0)


def gating_entropy(gate, valid_mask=None):
    """Mean per-pixel gate entropy and its gradient with respect to the logits."""
    w = gate.weights
    ent = pixel_entropy(gate)
    if valid_mask is None:
        valid = np.ones(ent.shape, dtype=bool)
    else:
        valid = np.asarray(getattr(valid_mask, "data", valid_mask), dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(w)
    loss = float(np.sum(ent[valid])) / n
    logw = np.where(w > 0, gate.log_weights, 0.0)
    grad = -(w / gate.temperature) * (logw + ent[None])
    grad *= (valid / n)[None]
    return loss, grad


def total_loss(output, gt_depth, cfg):
    """``lambda_d * NLL + lambda_e * entropy`` with gradients summed the same way."""
    nll, g_mu, g_log = mixture_nll(output, gt_depth, cfg)
    ent, g_ent = gating_entropy(output.gate, cfg.valid_mask)
    return LossTerms(
        total=cfg.lambda_d * nll + cfg.lambda_e * ent,
        nll=nll,
        entropy=ent,
        grad_mu=cfg.lambda_d * g_mu,
        grad_logits=cfg.lambda_d * g_log + cfg.lambda_e * g_ent,
    )


def is_one_hot(weights, atol=1e-12):
    w = _arr(weights)
    near0 = np.abs(w) <= atol
    near1 = np.abs(w - 1.0) <= atol
    return bool(np.all(near0 | near1) and np.all(near1.sum(axis=0) == 1))


def hard_limit_check(output, gt_depth, sigma):
    """Mixture NLL next to the squared-error form it reduces to under one-hot gating.

    Returns ``(nll, scaled_sq_err)`` where the second value is
    ``mean((d - mu_selected)^2) / (2 sigma^2) + log(2 pi sigma^2) / 2``.
    """
    if not is_one_hot(output.gate.weights):
        raise ValueError("hard_limit_check requires a one-hot gate")
    gt = _arr(gt_depth)
    nll, _, _ = mixture_nll(output, gt, LossConfig(sigma=sigma, lambda_e=0.0))
    valid = np.isfinite(gt)
    selected = combine(output.expert_depths, output.gate, hard=True)
    err = (gt - selected)[valid]
    sq = float(np.mean(err * err)) / (2.0 * sigma * sigma) + 0.5 * math.log(2.0 * math.pi * sigma * sigma)
    return nll, sq
