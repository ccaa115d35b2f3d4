"""Depth-edge extraction and 2-D evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

SOBEL_THRESHOLD = 50.0
DELTA_BASE = 1.25


@dataclass(frozen=True)
class EdgeConfig:
    threshold: float = SOBEL_THRESHOLD
    scale_to_255: bool = True

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("edge threshold must be positive")


class _Report:
    def to_kv(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def to_tsv(self):
        return "\t".join(_fmt(v) for v in asdict(self).values())

    @classmethod
    def tsv_header(cls):
        return "\t".join(f.name for f in fields(cls))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass(frozen=True)
class BoundaryReport(_Report):
    miou: float
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gt: int
    n_intersection: int
    n_union: int


@dataclass(frozen=True)
class DepthReport(_Report):
    abs_rel: float
    delta_1: float
    delta_2: float
    delta_3: float
    scale: float
    n_valid: int


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def sobel_magnitude(depth, cfg=EdgeConfig()):
    """Gradient magnitude from 3x3 Sobel kernels with edge-replicated borders.

    With ``cfg.scale_to_255`` the finite values are first mapped affinely
    onto [0, 255] (a constant map becomes all zeros).  NaN pixels spread
    NaN to themselves and every output whose 3x3 window touches them.
    """
    d = _arr(depth)
    valid = np.isfinite(d)
    if not valid.any():
        raise ValueError("sobel_magnitude needs at least one finite pixel")
    if cfg.scale_to_255:
        lo, hi = d[valid].min(), d[valid].max()
        d = (d - lo) * (255.0 / (hi - lo)) if hi > lo else np.where(valid, 0.0, np.nan)
    p = np.pad(d, 1, mode="edge")
    h, w = d.shape
    tl, tc, tr = p[0:h, 0:w], p[0:h, 1:w + 1], p[0:h, 2:w + 2]
    ml, mr = p[1:h + 1, 0:w], p[1:h + 1, 2:w + 2]
    bl, bc, br = p[2:h + 2, 0:w], p[2:h + 2, 1:w + 1], p[2:h + 2, 2:w + 2]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    mag = np.sqrt(gx * gx + gy * gy)
    mag[~valid] = np.nan  # the kernels' centre tap is zero, so mark invalid pixels directly
    return mag


def extract_edges(depth, cfg=EdgeConfig()):
    mag = sobel_magnitude(depth, cfg)
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(mag, nan=-np.inf) > cfg.threshold


def boundary_metrics(pred_edges, gt_edges):
    """Set overlap of two edge masks.

    Conventions: both masks empty gives 1 for every score; an empty
    prediction against a non-empty reference has precision 0 (and, by
    symmetry, an empty reference gives recall 0).
    """
    p = np.asarray(getattr(pred_edges, "data", pred_edges), dtype=bool)
    g = np.asarray(getattr(gt_edges, "data", gt_edges), dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"edge masks differ in shape: {p.shape} vs {g.shape}")
    n_p, n_g = int(p.sum()), int(g.sum())
    inter = int((p & g).sum())
    union = int((p | g).sum())
    if union == 0:
        return BoundaryReport(1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    precision = inter / n_p if n_p else 0.0
    recall = inter / n_g if n_g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return BoundaryReport(inter / union, precision, recall, f1, n_p, n_g, inter, union)


def depth_metrics(pred, gt, median_scaling=True):
    """AbsRel and threshold accuracies over pixels where both maps are finite and gt > 0."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(p) & np.isfinite(g) & (g > 0)
    if not valid.any():
        raise ValueError("depth_metrics needs at least one valid pixel with gt > 0")
    p, g = p[valid], g[valid]
    scale = 1.0
    if median_scaling:
        med = np.median(p)
        if not med > 0:
            raise ValueError(f"median of prediction must be positive for median scaling, got {med}")
        scale = float(np.median(g) / med)
        p = p * scale
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return DepthReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        delta_1=float(np.mean(ratio < DELTA_BASE)),
        delta_2=float(np.mean(ratio < DELTA_BASE**2)),
        delta_3=float(np.mean(ratio < DELTA_BASE**3)),
        scale=scale,
        n_valid=int(valid.sum()),
    )
