"""Deterministic single-sample training loop for the mixture depth network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mixture import LossConfig, gate_argmax, pixel_entropy, total_loss
from .network import Annealer, NetConfig, backward, forward, init_params
from .seeding import derive_rng

FULL_SCALE_LR = 1e-5
DESK_LR = 1e-3
DEFAULT_WEIGHT_DECAY = 0.05
ABLATION_LAMBDAS = (1e-2, 1e-3, 1e-4, 0.0)
LOG_COLUMNS = ("step", "total", "nll", "entropy", "tau", "mean_gate_entropy")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, segment):
        super().__init__(f"non-finite gradient in segment {segment}")
        self.segment = segment


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, tau):
        super().__init__(f"training diverged (non-finite loss or parameters) at step {step}, tau={tau!r}")
        self.step = step
        self.tau = tau


@dataclass
class OptimState:
    """AdamW moments and hyper-parameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = FULL_SCALE_LR
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(m=np.zeros(n), v=np.zeros(n), **kwargs)


def opt_step(params, state, frozen=None):
    """One AdamW update with bias correction, then zero the gradients.

    Weight decay touches only entries flagged in ``params.decay_mask``;
    entries flagged in ``frozen`` are left untouched entirely.
    """
    g = params.grads
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteGradientError(params.segment_of(bad))
    b1, b2 = state.betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    decay = state.lr * state.weight_decay * params.values * params.decay_mask
    step = decay + update
    if frozen is not None:
        step[frozen] = 0.0
    params.values -= step
    params.zero_grad()
    params.bump()


@dataclass
class StepRecord:
    step: int
    total: float
    nll: float
    entropy: float  # lambda_e * entropy loss
    tau: float
    mean_gate_entropy: float

    def as_row(self):
        vals = [f"{self.step}"] + [format(getattr(self, c), ".17g") for c in LOG_COLUMNS[1:]]
        return "\t".join(vals)


@dataclass
class TrainRun:
    net: NetConfig
    loss: LossConfig
    scenes: list
    steps: int
    seed: int = 0
    lr: float = DESK_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    tau0: float = 1.0
    tau_decay: float = 0.995
    tau_floor: float = 0.1
    freeze_encoder: bool = False


@dataclass
class TrainResult:
    params: object
    log: list = field(default_factory=list)
    tau: float = 1.0
    optim: OptimState | None = None


def scene_order(seed, n, steps):
    """Scene index per step: a fresh seeded permutation for every epoch."""
    order = []
    epoch = 0
    while len(order) < steps:
        order.extend(derive_rng(seed, "order", epoch).permutation(n).tolist())
        epoch += 1
    return order[:steps]


def train(run, params=None):
    if not run.scenes:
        raise ValueError("training needs at least one scene")
    params = init_params(run.net) if params is None else params
    state = OptimState.zeros(len(params), lr=run.lr, weight_decay=run.weight_decay)
    annealer = Annealer(run.tau0, run.tau_decay, run.tau_floor)
    frozen = None
    if run.freeze_encoder:
        frozen = np.zeros(len(params), dtype=bool)
        for s in params.segments:
            if s.name.startswith("encoder."):
                frozen[s.offset:s.stop] = True

    log = []
    for step, idx in enumerate(scene_order(run.seed, len(run.scenes), run.steps)):
        scene = run.scenes[idx]
        tau = annealer.tau
        if not np.isfinite(params.values).all():
            raise TrainingDiverged(step, tau)
        trace = forward(params, scene.input, tau)
        terms = total_loss(trace.output, scene.gt_depth, run.loss)
        if not math.isfinite(terms.total):
            raise TrainingDiverged(step, tau)
        backward(trace, params, grad_mu=terms.grad_mu, grad_logits=terms.grad_logits)
        opt_step(params, state, frozen)
        log.append(StepRecord(step, terms.total, terms.nll, run.loss.lambda_e * terms.entropy, tau, terms.entropy))
        annealer.step()
    return TrainResult(params=params, log=log, tau=annealer.tau, optim=state)


def write_log(log, path):
    lines = [r.as_row() for r in log]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_log(path):
    records = []
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        records.append(StepRecord(int(parts[0]), *(float(p) for p in parts[1:])))
    return records


@dataclass
class GateStats:
    mean_entropy: float
    effective_experts: float
    frac_le2_effective: float
    argmax_maps: list
    entropy_maps: list


def gate_statistics(params, scenes, tau):
    """Gate entropy on held-out scenes at temperature ``tau``."""
    ent_maps, argmax_maps = [], []
    for scene in scenes:
        out = forward(params, scene.input, tau).output
        ent_maps.append(pixel_entropy(out.gate))
        argmax_maps.append(gate_argmax(out.gate))
    all_ent = np.concatenate([e.ravel() for e in ent_maps])
    mean = float(all_ent.mean())
    return GateStats(
        mean_entropy=mean,
        effective_experts=math.exp(mean),
        frac_le2_effective=float(np.mean(np.exp(all_ent) <= 2.0)),
        argmax_maps=argmax_maps,
        entropy_maps=ent_maps,
    )


@dataclass
class AblationResult:
    lambda_e: float
    final_loss: float
    mean_gate_entropy: float
    effective_experts: float
    frac_le2_effective: float
    gate_weights: np.ndarray  # first held-out scene, for visualisation
    params: object = None

    def as_row(self):
        return "\t".join([format(self.lambda_e, ".17g"), format(self.final_loss, ".17g"),
                          format(self.mean_gate_entropy, ".17g"), format(self.effective_experts, ".17g")])


ABLATION_HEADER = "lambda_e\tfinal_loss\tmean_gate_entropy\teffective_experts"


def final_loss(log, window=50):
    """Mean total training loss over the last ``window`` steps."""
    tail = log[-window:]
    return float(np.mean([r.total for r in tail])) if tail else float("nan")


def run_ablation_point(run, lam, heldout):
    result = train(replace(run, loss=replace(run.loss, lambda_e=lam)))
    stats = gate_statistics(result.params, heldout, result.tau)
    weights = forward(result.params, heldout[0].input, result.tau).output.gate.weights
    return AblationResult(
        lambda_e=lam,
        final_loss=final_loss(result.log),
        mean_gate_entropy=stats.mean_entropy,
        effective_experts=stats.effective_experts,
        frac_le2_effective=stats.frac_le2_effective,
        gate_weights=weights,
        params=result.params,
    )


def ablate_entropy(run, lambdas=ABLATION_LAMBDAS, heldout=None, pool=None):
    """Train one run per entropy weight with identical seeds and data.

    Gate statistics are measured on ``heldout`` scenes (default: the first
    training scene) at each run's final temperature.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("need at least one entropy weight")
    heldout = list(heldout) if heldout else run.scenes[:1]
    if pool is None:
        return [run_ablation_point(run, lam, heldout) for lam in lambdas]
    return list(pool.map(run_ablation_point, [run] * len(lambdas), lambdas, [heldout] * len(lambdas)))
