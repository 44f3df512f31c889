"""Command-line entry point: train, eval, explain, gradcheck, bench,
gen-phantoms.

Configuration comes from defaults, then an optional key=value config file,
then explicit flags, in that order. Unknown config keys are rejected so a
typo cannot silently fall back to a default. Every run dumps its resolved
configuration into the output directory for provenance. Exit codes: 0
success, 1 runtime failure, 2 usage/config error. stdout carries progress
logs; machine-readable results go to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import data_io, gradcheck
from .architectures import (UnknownLayerError, build, build_from_checkpoint,
                            make_spec)
from .data_io import PhantomSpec, load_manifest, load_split, read_volume
from .gradcam import compute_gradcam, export_heatmap, write_peak_report
from .metrics import acc_sen_spe, auc, confusion
from .training import TrainConfig, evaluate, train


class UsageError(Exception):
    """Bad flags, bad config keys, or missing inputs: exit code 2."""


# keys each command accepts from a config file (flag names, dashes as underscores)
_COMMAND_KEYS = {
    "train": {"data", "model", "out", "seed", "epochs", "batch_size", "lr_start",
              "lr_end", "lr_schedule", "width_mult", "attention_stages", "dtype"},
    "eval": {"data", "checkpoint", "model", "out", "split", "threshold", "seed"},
    "explain": {"checkpoint", "volume", "layer", "class", "out", "top_fraction",
                "seed"},
    "gradcheck": {"seed", "out"},
    "bench": {"data", "models", "out", "seed", "epochs", "batch_size",
              "lr_start", "lr_end", "lr_schedule", "width_mult", "dtype"},
    "gen-phantoms": {"out", "n_per_class", "grid", "noise_std", "blob_count",
                     "radius_range", "intensity_delta", "variant", "seed",
                     "fractions"},
}


def _parse_config_file(path: str, allowed: set[str]) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in allowed:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r} "
                                 f"for this command")
            values[key] = value.strip()
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return value in ("1", "true", "True", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in str(value).split(",") if v != "")
    return value


def resolve_config(command: str, args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; strict key checking."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in _parse_config_file(args.config, _COMMAND_KEYS[command]).items():
            resolved[key] = _coerce(raw, defaults.get(key, raw))
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_resolved(resolved: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w",
              encoding="utf-8") as f:
        for key in sorted(resolved):
            value = resolved[key]
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            f.write(f"{key}={value}\n")


def _load_manifest_checked(path: str) -> data_io.DatasetManifest:
    if not path:
        raise UsageError("--data manifest path is required")
    if not os.path.exists(path):
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(epochs=resolved["epochs"], batch_size=resolved["batch_size"],
                       lr_start=resolved["lr_start"], lr_end=resolved["lr_end"],
                       lr_schedule=resolved["lr_schedule"], seed=resolved["seed"])


TRAIN_DEFAULTS = {
    "data": "", "model": "micro-resattnet18", "out": "runs/train", "seed": 0,
    "epochs": 20, "batch_size": 8, "lr_start": 1e-4, "lr_end": 1e-6,
    "lr_schedule": "cosine", "width_mult": 1.0, "attention_stages": (3, 4),
    "dtype": "f32",
}


def cmd_train(args) -> int:
    resolved = resolve_config("train", args, TRAIN_DEFAULTS)
    manifest = _load_manifest_checked(resolved["data"])
    out_dir = resolved["out"]
    _write_resolved(resolved, out_dir)
    x, y = load_split(manifest, "train")
    val = None
    if any(e.split == "val" for e in manifest.entries):
        val = load_split(manifest, "val")
    spec = make_spec(resolved["model"], resolved["width_mult"],
                     tuple(resolved["attention_stages"]))
    model = build(spec, input_spatial=x.shape[2:], seed=resolved["seed"],
                  dtype=resolved["dtype"])
    print(f"training {spec.name} ({model.param_count()} params) on "
          f"{len(x)} volumes")
    cfg = _train_config(resolved)
    report = train(model, x, y, cfg, out_dir=out_dir, val=val,
                   log=lambda rec: print(json.dumps(rec, sort_keys=True)))
    final = report.final()
    print(f"done: final loss {final['loss']:.6f} acc {final['acc']:.4f}; "
          f"checkpoints in {out_dir}")
    return 0


EVAL_DEFAULTS = {
    "data": "", "checkpoint": "", "model": "", "out": "runs/eval",
    "split": "test", "threshold": 0.5, "seed": 0,
}


def cmd_eval(args) -> int:
    resolved = resolve_config("eval", args, EVAL_DEFAULTS)
    ckpt = resolved["checkpoint"]
    if not ckpt or not os.path.exists(ckpt):
        raise UsageError(f"checkpoint not found: {ckpt}")
    manifest = _load_manifest_checked(resolved["data"])
    out_dir = resolved["out"]
    _write_resolved(resolved, out_dir)
    model = build_from_checkpoint(ckpt)
    if resolved["model"] and resolved["model"] != model.spec.name:
        raise RuntimeError(f"checkpoint holds arch {model.spec.name!r} but "
                           f"--model asked for {resolved['model']!r}")
    split = resolved["split"]
    rows = [e for e in manifest.entries if e.split == split]
    if not rows:
        raise RuntimeError(f"no samples in split {split!r}")
    x, y = load_split(manifest, split)
    loss, acc_eval, scores = evaluate(model, x, y)
    counts = confusion(scores, y, resolved["threshold"])
    acc, sen, spe = acc_sen_spe(counts)
    try:
        area = auc(scores, y)
    except ValueError:
        area = None
    with open(os.path.join(out_dir, "scores.tsv"), "w", encoding="utf-8") as f:
        for e, s in zip(rows, scores):
            f.write(f"{e.path}\t{e.label}\t{float(s)!r}\n")
    summary = {
        "split": split, "n": len(rows), "loss": loss, "threshold": resolved["threshold"],
        "confusion": {"tp": counts.tp, "tn": counts.tn, "fp": counts.fp,
                      "fn": counts.fn},
        "acc": acc, "sen": sen, "spe": spe, "auc": area,
    }
    with open(os.path.join(out_dir, "eval_summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    print(f"eval {split}: n={len(rows)} acc={acc} sen={sen} spe={spe} auc={area}")
    return 0


EXPLAIN_DEFAULTS = {
    "checkpoint": "", "volume": "", "layer": "", "class": 1,
    "out": "runs/explain", "top_fraction": 0.05, "seed": 0,
}


def cmd_explain(args) -> int:
    resolved = resolve_config("explain", args, EXPLAIN_DEFAULTS)
    ckpt = resolved["checkpoint"]
    if not ckpt or not os.path.exists(ckpt):
        raise UsageError(f"checkpoint not found: {ckpt}")
    vol_path = resolved["volume"]
    if not vol_path or not os.path.exists(vol_path):
        raise UsageError(f"volume not found: {vol_path}")
    out_dir = resolved["out"]
    _write_resolved(resolved, out_dir)
    model = build_from_checkpoint(ckpt)
    record = read_volume(vol_path)
    layer = resolved["layer"] or model.feature_layer_names()[-1]
    if layer not in model.feature_layer_names():
        raise UsageError(f"unknown layer {layer!r}; available: "
                         f"{', '.join(model.feature_layer_names())}")
    result = compute_gradcam(model, record.volume[None], int(resolved["class"]), layer)
    ext = ".nii" if vol_path.lower().endswith(".nii") else ".vraw"
    heat_path = os.path.join(out_dir, f"heatmap{ext}")
    montage_path = os.path.join(out_dir, "montage.png")
    export_heatmap(result, heat_path, montage_path, base_volume=record.volume)
    report = write_peak_report(result, os.path.join(out_dir, "peak_report.json"),
                               resolved["top_fraction"])
    print(f"explained class {resolved['class']} at layer {layer}: heatmap "
          f"{result.heatmap.shape} -> {heat_path}, {report['voxel_count']} peak voxels")
    return 0


GRADCHECK_DEFAULTS = {"seed": 0, "out": ""}


def cmd_gradcheck(args) -> int:
    resolved = resolve_config("gradcheck", args, GRADCHECK_DEFAULTS)
    rows = gradcheck.run_all(seed=resolved["seed"])
    lines = [f"{row.name}\t{row.max_rel_err:.6e}\t"
             f"{'PASS' if row.passed else 'FAIL'}" for row in rows]
    for line in lines:
        print(line)
    if resolved["out"]:
        _write_resolved(resolved, resolved["out"])
        with open(os.path.join(resolved["out"], "gradcheck.tsv"), "w",
                  encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    return 0 if all(row.passed for row in rows) else 1


BENCH_DEFAULTS = {
    "data": "", "models": ("vgg", "resnet18", "resattnet18", "resnet34",
                           "resattnet34"),
    "out": "runs/bench", "seed": 0, "epochs": 5, "batch_size": 8,
    "lr_start": 1e-4, "lr_end": 1e-6, "lr_schedule": "cosine",
    "width_mult": 1.0, "dtype": "f32",
}


def cmd_bench(args) -> int:
    resolved = resolve_config("bench", args, BENCH_DEFAULTS)
    manifest = _load_manifest_checked(resolved["data"])
    out_dir = resolved["out"]
    _write_resolved(resolved, out_dir)
    x_train, y_train = load_split(manifest, "train")
    x_test, y_test = load_split(manifest, "test")
    cfg = _train_config(resolved)
    header = "model\tparams\tacc\tsen\tspe\tauc\twall_s"
    rows = [header]
    print(header)
    for name in resolved["models"]:
        t0 = time.time()
        try:
            spec = make_spec(name, resolved["width_mult"])
            model = build(spec, input_spatial=x_train.shape[2:],
                          seed=resolved["seed"], dtype=resolved["dtype"])
            train(model, x_train, y_train, cfg)
            _, _, scores = evaluate(model, x_test, y_test)
            counts = confusion(scores, y_test, 0.5)
            acc, sen, spe = acc_sen_spe(counts)
            try:
                area = auc(scores, y_test)
            except ValueError:
                area = None
            row = (f"{name}\t{model.param_count()}\t{acc!r}\t{sen!r}\t{spe!r}"
                   f"\t{area!r}\t{time.time() - t0:.1f}")
        except Exception as exc:  # record the failure, keep the table going
            row = f"{name}\tERROR: {exc}\t\t\t\t\t{time.time() - t0:.1f}"
        rows.append(row)
        print(row)
    with open(os.path.join(out_dir, "bench.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return 0


GEN_DEFAULTS = {
    "out": "runs/phantoms", "n_per_class": 100, "grid": 32, "noise_std": 0.05,
    "blob_count": 3, "radius_range": (3, 5), "intensity_delta": -0.8,
    "variant": "blobs", "seed": 0, "fractions": (0.8, 0.0, 0.2),
}


def cmd_gen_phantoms(args) -> int:
    resolved = resolve_config("gen-phantoms", args, GEN_DEFAULTS)
    out_dir = resolved["out"]
    _write_resolved(resolved, out_dir)
    spec = PhantomSpec(grid=resolved["grid"], noise_std=resolved["noise_std"],
                       blob_count=resolved["blob_count"],
                       radius_range=tuple(resolved["radius_range"]),
                       intensity_delta=resolved["intensity_delta"],
                       seed=resolved["seed"], variant=resolved["variant"])
    manifest_path = data_io.write_phantom_dataset(
        spec, resolved["n_per_class"], out_dir, tuple(resolved["fractions"]))
    print(f"wrote {2 * resolved['n_per_class']} phantoms under {out_dir}; "
          f"manifest: {manifest_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volnet",
        description="Volumetric classification networks: train, evaluate, "
                    "explain, verify gradients, benchmark, generate phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    add_common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--model", help="vgg | resnet18 | resnet34 | resattnet18 | "
                                   "resattnet34 (micro- prefix for 1/8 width)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=["cosine", "linear"])
    p.add_argument("--width-mult", dest="width_mult", type=float)
    p.add_argument("--attention-stages", dest="attention_stages",
                   type=lambda s: tuple(int(v) for v in s.split(",") if v))
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--model", help="expected architecture name (checked)")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM heatmap for one volume")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--volume")
    p.add_argument("--layer")
    p.add_argument("--class", dest="class", type=int, choices=[0, 1])
    p.add_argument("--top-fraction", dest="top_fraction", type=float)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference check of all "
                                         "backward passes (f64)")
    add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="train/evaluate several architectures "
                                     "on one dataset")
    add_common(p)
    p.add_argument("--data")
    p.add_argument("--models", type=lambda s: tuple(v for v in s.split(",") if v))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=["cosine", "linear"])
    p.add_argument("--width-mult", dest="width_mult", type=float)
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-phantoms", help="write a synthetic phantom dataset")
    add_common(p)
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--blob-count", dest="blob_count", type=int)
    p.add_argument("--radius-range", dest="radius_range",
                   type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--intensity-delta", dest="intensity_delta", type=float)
    p.add_argument("--variant", choices=["blobs", "long_range"])
    p.add_argument("--fractions",
                   type=lambda s: tuple(float(v) for v in s.split(",")))
    p.set_defaults(func=cmd_gen_phantoms)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (UnknownLayerError, FileNotFoundError) as exc:
        message = exc.args[0] if exc.args else str(exc)
        print(str(message), file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
