"""``moedepth`` command line: gen, train, ablate, eval, render.

Every ``RunConfig`` key can be given in a ``--config`` file as ``key=value``
or on the command line as ``--key value`` (underscores become dashes).
Exit status is 0 on success, 1 on runtime or I/O failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cloud, gridio
from .config import ConfigError, RunConfig
from .network import forward, load_checkpoint, save_checkpoint
from .pipeline import (
    RECORD_COLUMNS, EvalOptions, evaluate_model, evaluate_prediction, format_record, load_dataset,
    mean_record, parallel_map, predict_scene, write_dataset,
)
from .trainer import ABLATION_HEADER, TrainingDiverged, ablate_entropy, train, write_log

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _tau_bits(tau):
    return struct.unpack("<q", struct.pack("<d", float(tau)))[0]


def _bits_tau(bits):
    return struct.unpack("<d", struct.pack("<q", int(bits)))[0]


# ---- parser ----------------------------------------------------------------

_VERB_OPTIONS = {
    "gen": ("out",),
    "train": ("data", "out"),
    "ablate": ("data", "out"),
    "eval": ("data", "model", "out", "gt_as_pred"),
    "render": ("data", "model", "out", "scenes"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="moedepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, extra in _VERB_OPTIONS.items():
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, help="key=value file applied before flag overrides")
        if "out" in extra:
            p.add_argument("--out", type=Path, required=True)
        if "data" in extra:
            p.add_argument("--data", type=Path, required=True)
        if "model" in extra:
            p.add_argument("--model", type=Path, required=True)
        if "gt_as_pred" in extra:
            p.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")
        if "scenes" in extra:
            p.add_argument("--scenes", default="", help="comma-separated scene names or indices (default: test split)")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="VALUE")
    return parser


def resolve_config(args):
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return base.with_overrides(overrides)


# ---- verbs -----------------------------------------------------------------

def cmd_gen(args, cfg):
    if cfg.count < 1:
        raise UsageError(f"--count must be >= 1, got {cfg.count}")
    write_dataset(cfg.scene_spec(), cfg.count, cfg.seed, args.out)
    (Path(args.out) / "config.txt").write_text(cfg.to_text())


def _load_split(data):
    entries, scenes = load_dataset(data)
    if not entries:
        raise UsageError(f"{data}: dataset is empty")
    train_set = [s for e, s in zip(entries, scenes) if e.split == "train"]
    test_set = [(e, s) for e, s in zip(entries, scenes) if e.split == "test"]
    return entries, scenes, train_set, test_set


def cmd_train(args, cfg):
    if cfg.steps < 0:
        raise UsageError("--steps must be >= 0")
    _, scenes, train_set, test_set = _load_split(args.data)
    train_set = train_set or scenes
    result = train(cfg.train_run(train_set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.mdc", result.params, steps=cfg.steps, tau_bits=_tau_bits(result.tau))
    write_log(result.log, out / "train.log")
    (out / "config.txt").write_text(cfg.to_text())
    first = test_set[0][1] if test_set else scenes[0]
    weights = forward(result.params, first.input, result.tau).output.gate.weights
    gridio.export_color_image(weights, "gate-argmax", out / "gate_argmax.ppm")


def cmd_ablate(args, cfg):
    lambdas = cfg.lambda_list()
    if not lambdas:
        raise UsageError("--lambdas must list at least one value")
    _, scenes, train_set, test_set = _load_split(args.data)
    train_set = train_set or scenes
    heldout = [s for _, s in test_set][: max(cfg.heldout, 1)] or train_set[:1]
    results = ablate_entropy(cfg.train_run(train_set), lambdas, heldout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [ABLATION_HEADER] + [r.as_row() for r in results]
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n")
    for i, r in enumerate(results):
        gridio.export_color_image(r.gate_weights, "gate-argmax", out / f"gate_argmax_{i}_{r.lambda_e:g}.ppm")


def _load_model(path):
    params, extra = load_checkpoint(path)
    if "tau_bits" not in extra:
        raise ValueError(f"{path}: checkpoint lacks the final temperature")
    return params, _bits_tau(extra["tau_bits"])


def _eval_gt(name, scene, opts):
    return evaluate_prediction(name, scene.gt_depth, np.ones_like(scene.gt_depth), scene, opts)


def cmd_eval(args, cfg):
    _, scenes, _, test_set = _load_split(args.data)
    if not test_set:
        test_set = [(None, s) for s in scenes]
    names = [e.directory.name if e else f"scene_{i:04d}" for i, (e, _) in enumerate(test_set)]
    test_scenes = [s for _, s in test_set]
    opts = EvalOptions(
        edge=cfg.edge_config(), confidence_percentile=cfg.confidence_mask,
        flying_k=cfg.flying_k, flying_ratio=cfg.flying_ratio,
    )
    n = len(test_scenes)
    if args.gt_as_pred:
        records = parallel_map(_eval_gt, names, test_scenes, [opts] * n)
    else:
        params, tau = _load_model(args.model)
        records = parallel_map(evaluate_model, [params] * n, [tau] * n, test_scenes, names, [opts] * n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(RECORD_COLUMNS)] + [format_record(r) for r in records]
    (out / "records.tsv").write_text("\n".join(lines) + "\n")
    summary = mean_record(records)
    (out / "summary.txt").write_text("".join(f"{k}={_fmt(summary[k])}\n" for k in RECORD_COLUMNS[1:]))


def _fmt(v):
    return format(float(v), ".17g")


def _select_scenes(entries, scenes, spec):
    by_name = {e.directory.name: (e, s) for e, s in zip(entries, scenes)}
    by_index = {str(e.index): (e, s) for e, s in zip(entries, scenes)}
    if not spec.strip():
        chosen = [(e, s) for e, s in zip(entries, scenes) if e.split == "test"]
        return chosen or list(zip(entries, scenes))[:1]
    chosen = []
    for token in (t.strip() for t in spec.split(",")):
        if token in by_name:
            chosen.append(by_name[token])
        elif token in by_index:
            chosen.append(by_index[token])
        else:
            raise UsageError(f"unknown scene id {token!r}")
    return chosen


def cmd_render(args, cfg):
    entries, scenes = load_dataset(args.data)
    chosen = _select_scenes(entries, scenes, args.scenes)
    params, tau = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry, scene in chosen:
        name = entry.directory.name
        pred = predict_scene(params, tau, scene, hard=True)
        gridio.export_color_image(pred.depth, "depth-colormap", out / f"{name}_depth.ppm")
        gridio.export_color_image(pred.gate_weights, "gate-argmax", out / f"{name}_gate_argmax.ppm")
        gridio.export_color_image(pred.gate_weights, "gate-blend", out / f"{name}_gate_blend.ppm")
        cloud.write_ply(cloud.estimate_normals(cloud.unproject(pred.depth, scene.intrinsics)), out / f"{name}.ply")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval, "render": cmd_render}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.verb](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"moedepth {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"moedepth {args.verb}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"moedepth {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
