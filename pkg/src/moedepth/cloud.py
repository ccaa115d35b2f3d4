"""Point clouds from depth maps: normals, reconstruction metrics, flying points, confidence masking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import product
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels

BRUTE_FORCE_LIMIT = 100_000
FLYING_K = 8
FLYING_RATIO = 3.0


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    normals: np.ndarray | None = None
    pixel_index: np.ndarray | None = None  # flat index into the source grid
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals and points differ in length")
        if self.pixel_index is not None:
            self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64)
            if len(self.pixel_index) != n:
                raise ValueError("pixel indices and points differ in length")

    def __len__(self):
        return len(self.points)

    def grid(self):
        """Points scattered back onto their (H, W, 3) pixel grid, NaN where absent."""
        if self.pixel_index is None or self.grid_shape is None:
            raise ValueError("cloud has no grid structure")
        h, w = self.grid_shape
        g = np.full((h * w, 3), np.nan)
        g[self.pixel_index] = self.points
        return g.reshape(h, w, 3)


@dataclass(frozen=True)
class ReconReport:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float
    nc_available: bool

    def to_kv(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v):
    return str(int(v)) if isinstance(v, bool) else format(float(v), ".17g")


def unproject(depth, intrinsics):
    """Pinhole back-projection ``(u, v, d) -> ((u - cx) d / fx, (v - cy) d / fy, d)``.

    Pixels that are NaN or not strictly positive are skipped.
    """
    fx, fy, cx, cy = intrinsics
    if not (fx > 0 and fy > 0):
        raise ValueError("focal lengths must be positive")
    d = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    h, w = d.shape
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(d) & (d > 0)
    if not valid.any():
        raise ValueError("depth map has no valid pixels")
    idx = np.flatnonzero(valid.ravel())
    v, u = np.divmod(idx, w)
    z = d.ravel()[idx]
    pts = np.stack([(u - cx) * z / fx, (v - cy) * z / fy, z], axis=1)
    return PointCloud(pts, pixel_index=idx, grid_shape=(h, w))


def estimate_normals(cloud):
    """Unit normals from central-difference tangents, oriented towards the camera (n_z <= 0).

    Points without a full 4-neighbourhood (borders, holes) or with a
    degenerate cross product take the normal of the nearest pixel that has
    one.
    """
    g = cloud.grid()
    h, w, _ = g.shape
    normals = np.full((h, w, 3), np.nan)
    if h >= 3 and w >= 3:
        tx = g[1:-1, 2:] - g[1:-1, :-2]
        ty = g[2:, 1:-1] - g[:-2, 1:-1]
        n = np.cross(tx, ty)
        norm = np.linalg.norm(n, axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = n / norm
        normals[1:-1, 1:-1] = n
    with np.errstate(invalid="ignore"):
        good = np.isfinite(normals).all(axis=2) & (np.linalg.norm(np.nan_to_num(normals), axis=2) > 0.5)
    if good.any():
        flip = good & (normals[..., 2] > 0)
        normals[flip] *= -1.0
        if not good.all():
            _, (iy, ix) = ndimage.distance_transform_edt(~good, return_indices=True)
            normals = normals[iy, ix]
    else:
        normals[:] = (0.0, 0.0, -1.0)
    flat = normals.reshape(-1, 3)[cloud.pixel_index]
    return PointCloud(cloud.points.copy(), flat, cloud.pixel_index.copy(), cloud.grid_shape)


def _bucket_nn(queries, refs):
    lo = np.minimum(queries.min(axis=0), refs.min(axis=0))
    hi = np.maximum(queries.max(axis=0), refs.max(axis=0))
    extent = float((hi - lo).max())
    per_axis = max(1, round((len(refs) / 8.0) ** (1.0 / 3.0)))
    cell = extent / per_axis if extent > 0 else 1.0
    rcell = np.floor((refs - lo) / cell).astype(np.int64)
    qcell = np.floor((queries - lo) / cell).astype(np.int64)
    span = int(max(rcell.max(), qcell.max())) + 1
    slack = 1e-9 * max(extent, 1.0)

    buckets = {}
    order = np.lexsort((np.arange(len(refs)), rcell[:, 2], rcell[:, 1], rcell[:, 0]))
    keys = rcell[order]
    starts = np.flatnonzero(np.r_[True, (np.diff(keys, axis=0) != 0).any(axis=1)])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        buckets[tuple(keys[s])] = order[s:e]

    dist = np.full(len(queries), np.inf)
    idx = np.zeros(len(queries), dtype=np.int64)
    qkeys, inverse = np.unique(qcell, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    qorder = np.argsort(inverse, kind="stable")
    qbounds = np.searchsorted(inverse[qorder], np.arange(len(qkeys) + 1))
    for g, key in enumerate(qkeys):
        members = qorder[qbounds[g]:qbounds[g + 1]]
        q = queries[members]
        best_d2 = np.full(len(members), np.inf)
        best_i = np.full(len(members), np.iinfo(np.int64).max)
        for r in range(span + 1):
            cand = [buckets[c] for c in _shell(key, r) if c in buckets]
            if cand:
                ci = np.concatenate(cand)
                c = refs[ci]
                dx = q[:, 0:1] - c[:, 0]
                dy = q[:, 1:2] - c[:, 1]
                dz = q[:, 2:3] - c[:, 2]
                d2 = dx * dx + dy * dy
                d2 += dz * dz
                # lowest index wins ties, as in the brute-force scan
                pick = np.lexsort((np.broadcast_to(ci, d2.shape), d2), axis=1)[:, 0]
                cd2 = d2[np.arange(len(members)), pick]
                cidx = ci[pick]
                better = (cd2 < best_d2) | ((cd2 == best_d2) & (cidx < best_i))
                best_d2 = np.where(better, cd2, best_d2)
                best_i = np.where(better, cidx, best_i)
            # anything in shells beyond r is farther than r * cell
            if np.all(np.sqrt(best_d2) < r * cell - slack):
                break
        dist[members] = np.sqrt(best_d2)
        idx[members] = best_i
    return dist, idx


_SHELLS = {}


def _shell(center, r):
    """Cells at Chebyshev distance exactly ``r`` from ``center``."""
    if r not in _SHELLS:
        _SHELLS[r] = [off for off in product(range(-r, r + 1), repeat=3) if max(map(abs, off)) == r]
    cx, cy, cz = (int(v) for v in center)
    return [(cx + dx, cy + dy, cz + dz) for dx, dy, dz in _SHELLS[r]]


def nearest_neighbors(queries, refs, method="auto"):
    """Distance to and index of the nearest reference point for every query.

    ``method`` is ``brute``, ``bucket`` or ``auto`` (brute force below
    100k points).  Both searches are exact.
    """
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    r = np.ascontiguousarray(refs, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0:
        raise ValueError("empty reference cloud")
    if method == "auto":
        method = "brute" if max(len(q), len(r)) < BRUTE_FORCE_LIMIT else "bucket"
    if method == "brute":
        return kernels.nn_brute(q, r)
    if method == "bucket":
        return _bucket_nn(q, r)
    raise ValueError(f"unknown search method {method!r}")


def recon_metrics(pred, gt, method="auto"):
    """Accuracy (pred -> gt), completeness (gt -> pred) and normal consistency."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("recon_metrics needs non-empty clouds")
    acc, nn_gt = nearest_neighbors(pred.points, gt.points, method)
    comp, _ = nearest_neighbors(gt.points, pred.points, method)
    if pred.normals is not None and gt.normals is not None:
        cos = np.abs(np.sum(pred.normals * gt.normals[nn_gt], axis=1))
        nc_mean, nc_median, has_nc = float(cos.mean()), float(np.median(cos)), True
    else:
        nc_mean = nc_median = math.nan
        has_nc = False
    return ReconReport(
        acc_mean=float(acc.mean()),
        acc_median=float(np.median(acc)),
        comp_mean=float(comp.mean()),
        comp_median=float(np.median(comp)),
        nc_mean=nc_mean,
        nc_median=nc_median,
        nc_available=has_nc,
    )


def _image_offsets(h, w):
    dy, dx = np.mgrid[-(h - 1):h, -(w - 1):w]
    dy, dx = dy.ravel(), dx.ravel()
    keep = (dy != 0) | (dx != 0)
    dy, dx = dy[keep], dx[keep]
    order = np.lexsort((dx, dy, dy * dy + dx * dx))
    return dy[order], dx[order]


def neighbor_spread(cloud, k=FLYING_K):
    """Mean 3-D distance from each point to its ``k`` nearest image-space neighbours.

    Neighbours are the closest valid pixels by image distance, ties broken
    by row offset then column offset.
    """
    g = cloud.grid()
    h, w, _ = g.shape
    valid = np.isfinite(g).all(axis=2)
    n_valid = int(valid.sum())
    if k < 1 or n_valid < k + 1:
        raise ValueError(f"need at least {k + 1} valid points for {k} neighbours, have {n_valid}")
    count = np.zeros((h, w), dtype=np.int64)
    total = np.zeros((h, w))
    pending = valid.copy()
    for oy, ox in zip(*_image_offsets(h, w)):
        ys = slice(max(0, -oy), min(h, h - oy))
        xs = slice(max(0, -ox), min(w, w - ox))
        yn = slice(max(0, oy), min(h, h + oy))
        xn = slice(max(0, ox), min(w, w + ox))
        take = pending[ys, xs] & valid[yn, xn]
        if not take.any():
            continue
        diff = g[yn, xn] - g[ys, xs]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        total[ys, xs] += np.where(take, d, 0.0)
        count[ys, xs] += take
        pending &= count < k
        if not pending.any():
            break
    return (total / k).ravel()[cloud.pixel_index]


def detect_flying_points(cloud, k=FLYING_K, ratio=FLYING_RATIO):
    """Flag points whose neighbour spread exceeds ``ratio`` times the cloud's median spread.

    Returns ``(mask, count)`` with ``mask`` aligned to ``cloud.points``.
    """
    spread = neighbor_spread(cloud, k)
    mask = spread > ratio * np.median(spread)
    return mask, int(mask.sum())


def confidence_mask(depth, confidence, percentile):
    """Set to NaN the lowest-confidence ``floor(percentile% * n)`` valid pixels.

    Pixels are ranked by confidence, ties by flat pixel index, so the count
    masked is exact even for constant confidence.
    """
    if not 0 <= percentile < 100:
        raise ValueError("percentile must lie in [0, 100)")
    d = np.array(getattr(depth, "data", depth), dtype=np.float64)
    c = np.asarray(getattr(confidence, "data", confidence), dtype=np.float64)
    if d.shape != c.shape:
        raise ValueError("depth and confidence differ in shape")
    valid = np.flatnonzero((np.isfinite(d) & np.isfinite(c)).ravel())
    n_mask = int(math.floor(percentile / 100.0 * len(valid)))
    if n_mask:
        order = np.lexsort((valid, c.ravel()[valid]))
        d.ravel()[valid[order[:n_mask]]] = np.nan
    return d


def write_ply(cloud, path):
    has_n = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    if has_n:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    body = "\n".join(" ".join(format(v, ".9g") for v in row) for row in data)
    Path(path).write_text("\n".join(header) + "\n" + body + ("\n" if len(data) else ""))
