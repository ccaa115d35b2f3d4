"""Dataset directories, prediction and per-scene evaluation shared by the CLI and experiments."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cloud, evalkit
from .mixture import combine
from .network import forward
from .synthscene import is_test_index, load_scene, make_dataset, save_scene

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "index\tdir\tseed\tsplit"
THREADS_ENV = "MOE_DEPTH_THREADS"


def worker_count():
    cores = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    return max(1, min(cores, int(cap))) if cap else cores


def parallel_map(fn, *iterables):
    """``map`` over a process pool capped by ``MOE_DEPTH_THREADS``; results keep input order."""
    items = [list(it) for it in iterables]
    n = worker_count()
    if n <= 1 or len(items[0]) <= 1:
        return [fn(*args) for args in zip(*items)]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *items))


def write_dataset(template, count, seed, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = make_dataset(template, count, seed)
    lines = [MANIFEST_HEADER]
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}"
        save_scene(scene, out / name)
        lines.append(f"{i}\t{name}\t{scene.seed}\t{'test' if is_test_index(i) else 'train'}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return scenes


@dataclass
class DatasetEntry:
    index: int
    directory: Path
    seed: int
    split: str


def read_manifest(data_dir):
    data = Path(data_dir)
    rows = (data / MANIFEST).read_text().splitlines()
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValueError(f"{data / MANIFEST}: missing or malformed header")
    entries = []
    for row in rows[1:]:
        if row.strip():
            idx, name, seed, split = row.split("\t")
            entries.append(DatasetEntry(int(idx), data / name, int(seed), split))
    return entries


def load_dataset(data_dir):
    """Returns ``(entries, scenes)`` in manifest order."""
    entries = read_manifest(data_dir)
    return entries, [load_scene(e.directory) for e in entries]


@dataclass
class Prediction:
    depth: np.ndarray
    confidence: np.ndarray
    gate_weights: np.ndarray


def predict_scene(params, tau, scene, hard=True):
    """Depth (hard argmax gating by default) plus max-gate-weight confidence."""
    out = forward(params, scene.input, tau).output
    depth = combine(out.expert_depths, out.gate, hard=hard)
    return Prediction(depth=depth, confidence=out.gate.weights.max(axis=0), gate_weights=out.gate.weights)


@dataclass
class EvalOptions:
    edge: evalkit.EdgeConfig = evalkit.EdgeConfig()
    confidence_percentile: float = 1.0
    flying_k: int = cloud.FLYING_K
    flying_ratio: float = cloud.FLYING_RATIO
    median_scaling: bool = True


RECORD_COLUMNS = (
    "scene", "miou", "precision", "recall", "f1", "abs_rel", "delta_1", "delta_2", "delta_3",
    "acc_mean", "acc_median", "comp_mean", "comp_median", "nc_mean", "nc_median",
    "flying", "flying_masked", "points", "points_masked",
)


def evaluate_prediction(name, pred_depth, confidence, scene, opts=EvalOptions()):
    """All metrics for one scene as an ordered dict matching ``RECORD_COLUMNS``."""
    gt = scene.gt_depth
    br = evalkit.boundary_metrics(evalkit.extract_edges(pred_depth, opts.edge), evalkit.extract_edges(gt, opts.edge))
    dr = evalkit.depth_metrics(pred_depth, gt, median_scaling=opts.median_scaling)
    pc = cloud.estimate_normals(cloud.unproject(pred_depth, scene.intrinsics))
    gc = cloud.estimate_normals(cloud.unproject(gt, scene.intrinsics))
    rr = cloud.recon_metrics(pc, gc)
    _, n_fly = cloud.detect_flying_points(pc, opts.flying_k, opts.flying_ratio)
    masked = cloud.confidence_mask(pred_depth, confidence, opts.confidence_percentile)
    mc = cloud.unproject(masked, scene.intrinsics)
    _, n_fly_masked = cloud.detect_flying_points(mc, opts.flying_k, opts.flying_ratio)
    return {
        "scene": name,
        "miou": br.miou, "precision": br.precision, "recall": br.recall, "f1": br.f1,
        "abs_rel": dr.abs_rel, "delta_1": dr.delta_1, "delta_2": dr.delta_2, "delta_3": dr.delta_3,
        "acc_mean": rr.acc_mean, "acc_median": rr.acc_median,
        "comp_mean": rr.comp_mean, "comp_median": rr.comp_median,
        "nc_mean": rr.nc_mean, "nc_median": rr.nc_median,
        "flying": n_fly, "flying_masked": n_fly_masked,
        "points": len(pc), "points_masked": len(mc),
    }


def evaluate_model(params, tau, scene, name="", opts=EvalOptions()):
    pred = predict_scene(params, tau, scene)
    return evaluate_prediction(name, pred.depth, pred.confidence, scene, opts)


def format_record(rec):
    out = []
    for col in RECORD_COLUMNS:
        v = rec[col]
        out.append(v if isinstance(v, str) else str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g"))
    return "\t".join(out)


def mean_record(records):
    summary = {"scene": "mean"}
    for col in RECORD_COLUMNS[1:]:
        summary[col] = float(np.mean([r[col] for r in records]))
    return summary
