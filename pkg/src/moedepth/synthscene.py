"""Procedural piecewise-smooth depth scenes with exactly known occlusion edges.

A scene is a smooth polynomial background with up to a handful of
rectangles and disks pasted in front of it, each at constant or gently
sloped depth.  Objects are stacked in drawing order and every object sits
at least ``edge_floor`` nearer than anything within one pixel of its
footprint, so label changes and depth jumps coincide.

The edge mask marks the near side of each silhouette: pixel ``p`` is an
edge iff some 4-neighbour ``q`` shows something drawn earlier (hence
farther).  Equivalently, ``depth[q] - depth[p] > edge_floor``.

Dataset split: scene ``i`` of :func:`make_dataset` is a test scene iff
``i`` is odd.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gridio import read_grid, write_grid
from .seeding import derive_rng, derive_seed

INPUT_CHANNELS = 3


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    """Explicit object placement; ``kind`` is ``disk`` (radius ``ry``) or ``rectangle`` (half sizes)."""

    kind: str
    cy: float
    cx: float
    ry: float
    rx: float = 0.0

    def footprint(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w]
        if self.kind == "disk":
            return (yy - self.cy) ** 2 + (xx - self.cx) ** 2 <= self.ry**2
        if self.kind == "rectangle":
            return (np.abs(yy - self.cy) <= self.ry) & (np.abs(xx - self.cx) <= self.rx)
        raise ValueError(f"unknown object kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_objects: int | None = None  # None: uniform in 1..5
    near: float = 1.0
    far: float = 10.0
    noise_std: float = 0.05  # fraction of (far - near)
    edge_floor: float = 0.25
    seed: int = 0
    objects: tuple = field(default=())
    max_retries: int = 100

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.edge_floor <= 0 or self.noise_std < 0:
            raise ValueError("edge_floor must be positive and noise_std nonnegative")


@dataclass
class Scene:
    input: np.ndarray  # (3, H, W): noisy normalised depth, x coordinate, y coordinate
    gt_depth: np.ndarray
    gt_edges: np.ndarray
    intrinsics: tuple  # fx, fy, cx, cy
    spec: SceneSpec
    labels: np.ndarray | None = None

    @property
    def seed(self):
        return self.spec.seed


def default_intrinsics(h, w):
    f = 0.6 * w
    return (f, f, (w - 1) / 2.0, (h - 1) / 2.0)


def _coords(h, w):
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    return np.meshgrid(ys, xs, indexing="ij")


def _max_step(field_):
    steps = [0.0]
    if field_.shape[0] > 1:
        steps.append(np.abs(np.diff(field_, axis=0)).max())
    if field_.shape[1] > 1:
        steps.append(np.abs(np.diff(field_, axis=1)).max())
    return max(steps)


def _background(rng, spec, yy, xx):
    span = spec.far - spec.near
    base = spec.near + span * rng.uniform(0.6, 0.8)
    a = rng.uniform(-1.0, 1.0, size=5) * 0.05 * span
    var = a[0] * xx + a[1] * yy + a[2] * xx**2 + a[3] * xx * yy + a[4] * yy**2
    scale = 1.0
    step = _max_step(var)
    if step > 0.4 * spec.edge_floor:
        scale = 0.4 * spec.edge_floor / step
    if var.max() > 0:
        scale = min(scale, (spec.far - base) / var.max())
    if var.min() < 0:
        scale = min(scale, (base - spec.near - 0.3 * span) / -var.min())
    return base + scale * var


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _random_object(rng, h, w):
    if rng.random() < 0.5:
        r = rng.uniform(0.08, 0.25) * min(h, w)
        return ObjectSpec("disk", rng.uniform(0, h - 1), rng.uniform(0, w - 1), r, r)
    return ObjectSpec("rectangle", rng.uniform(0, h - 1), rng.uniform(0, w - 1),
                      rng.uniform(0.08, 0.22) * h, rng.uniform(0.08, 0.22) * w)


def occlusion_edges(labels):
    """Pixels with a 4-neighbour carrying a lower (earlier drawn, farther) label."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[1:] |= labels[1:] > labels[:-1]
    edge[:-1] |= labels[:-1] > labels[1:]
    edge[:, 1:] |= labels[:, 1:] > labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] > labels[:, 1:]
    return edge


def generate(spec):
    """Build one scene; deterministic in ``spec.seed``."""
    h, w = spec.height, spec.width
    span = spec.far - spec.near
    rng = derive_rng(spec.seed, "scene")
    yy, xx = _coords(h, w)
    depth = _background(rng, spec, yy, xx)
    labels = np.zeros((h, w), dtype=np.int32)

    explicit = list(spec.objects)
    n_obj = len(explicit) if explicit else (int(rng.integers(1, 6)) if spec.num_objects is None else spec.num_objects)
    # per-axis pixel spacing of the [-1, 1] coordinates; slopes keep in-object steps below 0.3 * floor
    max_slope = 0.3 * spec.edge_floor * np.array([max(h - 1, 1), max(w - 1, 1)]) / 2.0
    min_gap = max(3.0 * spec.edge_floor, 0.08 * span)

    for j in range(1, n_obj + 1):
        for _ in range(spec.max_retries):
            obj = explicit[j - 1] if explicit else _random_object(rng, h, w)
            fp = obj.footprint(h, w)
            if not fp.any():
                if explicit:
                    raise GenerationError(f"object {j} lies outside the image")
                continue
            if rng.random() < 0.5:
                gy, gx = rng.uniform(-1.0, 1.0, size=2) * max_slope
            else:
                gy = gx = 0.0
            plane = gy * (yy - yy[fp].mean()) + gx * (xx - xx[fp].mean())
            beneath = depth[_dilate(fp)].min()
            var_hi, var_lo = plane[fp].max(), plane[fp].min()
            room = beneath - spec.near - 0.02 * span - (var_hi - var_lo)
            if room < min_gap:
                if explicit:
                    gy = gx = 0.0
                    plane[:] = 0.0
                    var_hi = var_lo = 0.0
                    room = beneath - spec.near - 0.02 * span
                    if room < min_gap:
                        raise GenerationError(f"no depth room for object {j}")
                else:
                    continue
            gap = rng.uniform(min_gap, max(min_gap, min(0.25 * span, room)))
            obj_depth = beneath - gap - var_hi + plane
            depth = np.where(fp, obj_depth, depth)
            labels[fp] = j
            break
        else:
            raise GenerationError(f"could not place object {j} after {spec.max_retries} attempts")

    noise = rng.normal(0.0, spec.noise_std, size=(h, w)) if spec.noise_std > 0 else np.zeros((h, w))
    inputs = np.stack([(depth - spec.near) / span + noise, xx, yy])
    return Scene(
        input=inputs,
        gt_depth=depth,
        gt_edges=occlusion_edges(labels),
        intrinsics=default_intrinsics(h, w),
        spec=spec,
        labels=labels,
    )


def is_test_index(i):
    return i % 2 == 1


def make_dataset(template, count, seed):
    """``count`` scenes; scene ``i`` uses seed ``derive_seed(seed, "scene", i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate(replace(template, seed=derive_seed(seed, "scene", i))) for i in range(count)]


def split(scenes):
    """(train, test) lists by the index-parity rule."""
    train = [s for i, s in enumerate(scenes) if not is_test_index(i)]
    test = [s for i, s in enumerate(scenes) if is_test_index(i)]
    return train, test


_META_FLOATS = ("near", "far", "noise_std", "edge_floor")


def save_scene(scene, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c in range(scene.input.shape[0]):
        write_grid(scene.input[c], d / f"input_{c}.mdg")
    write_grid(scene.gt_depth, d / "gt_depth.mdg")
    write_grid(scene.gt_edges.astype(np.float64), d / "gt_edges.mdg")
    fx, fy, cx, cy = scene.intrinsics
    spec = scene.spec
    lines = [
        f"height={spec.height}",
        f"width={spec.width}",
        f"channels={scene.input.shape[0]}",
        f"seed={spec.seed}",
        f"num_objects={int(scene.labels.max()) if scene.labels is not None else spec.num_objects}",
        *(f"{k}={getattr(spec, k)!r}" for k in _META_FLOATS),
        f"fx={fx!r}",
        f"fy={fy!r}",
        f"cx={cx!r}",
        f"cy={cy!r}",
    ]
    (d / "scene.meta").write_text("\n".join(lines) + "\n")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_scene(directory):
    d = Path(directory)
    meta = read_meta(d / "scene.meta")
    channels = int(meta["channels"])
    inputs = np.stack([read_grid(d / f"input_{c}.mdg").data for c in range(channels)])
    spec = SceneSpec(
        height=int(meta["height"]),
        width=int(meta["width"]),
        num_objects=int(meta["num_objects"]),
        seed=int(meta["seed"]),
        **{k: float(meta[k]) for k in _META_FLOATS},
    )
    return Scene(
        input=inputs,
        gt_depth=read_grid(d / "gt_depth.mdg").data.copy(),
        gt_edges=read_grid(d / "gt_edges.mdg").data > 0.5,
        intrinsics=tuple(float(meta[k]) for k in ("fx", "fy", "cx", "cy")),
        spec=spec,
    )
