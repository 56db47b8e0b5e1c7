"""Command-line interface.

Subcommands: gen | train | eval | vmf-stats | gradcheck | sweep. Every run
resolves its config (CLI flag > --config JSON > defaults), writes its
outputs plus figures, and drops a manifest alongside the primary output so
the run can be reproduced byte-identically. Exit codes: 0 success, 1
validation error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import LabeledDescriptorSet
from .dataio import SyntheticSpec, generate_synthetic, load_descriptors, save_descriptors
from .errors import DescriptorFileError, NumericError, ValidationError
from .losses import LossConfig, gradient_check_trials
from .metrics import (
    build_verification_pairs,
    evaluate_descriptor_set,
    fpr_at_recall,
)
from .optim import EmbeddingTable, TrainConfig, train
from .vmf import hypersphere_stats

GRADCHECK_THRESHOLD = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with the validation code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(subcommand, config, seed, inputs, outputs, started, primary):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_seconds": time.monotonic() - started,
    }
    path = str(primary) + ".manifest.json"
    _write_json(path, manifest)
    return path


def _resolve(ns, defaults, converters=None):
    """CLI flag > config-file entry > default, for every known key."""
    converters = converters or {}
    resolved = dict(defaults)
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        for key, value in raw.items():
            conv = converters.get(key)
            resolved[key] = conv(value) if conv is not None and value is not None else value
    for key in defaults:
        value = getattr(ns, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require(resolved, *keys):
    for key in keys:
        if resolved[key] is None:
            raise ValidationError(f"--{key.replace('_', '-')} is required")


def _parse_int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(tok) for tok in str(text).split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"bad integer list: {text!r}") from exc


def _mode(token: str) -> str:
    return token.replace("-", "_")


# ---------------------------------------------------------------- gen


_GEN_DEFAULTS = {
    "classes": 100,
    "per_class": 8,
    "dim": 128,
    "kappa_intra": 150.0,
    "kappa_inter": 2.0,
    "seed": 0,
    "out": None,
}


def cmd_gen(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _GEN_DEFAULTS, {
        "classes": int, "per_class": int, "dim": int,
        "kappa_intra": float, "kappa_inter": float, "seed": int,
    })
    _require(cfg, "out")
    spec = SyntheticSpec(
        classes=cfg["classes"],
        samples_per_class=cfg["per_class"],
        dim=cfg["dim"],
        kappa_intra=cfg["kappa_intra"],
        kappa_inter=cfg["kappa_inter"],
        seed=cfg["seed"],
    )
    ds = generate_synthetic(spec)
    save_descriptors(ds, cfg["out"])
    outputs = [cfg["out"], cfg["out"] + ".json"]
    _write_manifest("gen", cfg, cfg["seed"], [], outputs, started, cfg["out"])
    print(f"wrote {len(ds)} descriptors (dim {ds.dim}) to {cfg['out']}")
    return 0


# ---------------------------------------------------------------- train


_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "optimizer": "adam",
    "epochs": 100,
    "pairs_per_batch": 512,
    "k": 8,
    "margin": 1.0,
    "fos": "qht",
    "sosr": "on",
    "neighbor_mode": "same-side",
    "dim": None,
    "seed": 0,
    "sgd_lr0": 0.01,
    "sgd_decay_epoch": 50,
    "sgd_decay_factor": 10.0,
    "adam_alpha": 0.01,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
}

_TRAIN_CONVERTERS = {
    "epochs": int, "pairs_per_batch": int, "k": int, "margin": float,
    "dim": int, "seed": int, "sgd_lr0": float, "sgd_decay_epoch": int,
    "sgd_decay_factor": float, "adam_alpha": float, "adam_beta1": float,
    "adam_beta2": float, "adam_eps": float,
}


def _train_config(cfg) -> TrainConfig:
    if cfg["sosr"] not in ("on", "off"):
        raise ValidationError("--sosr must be 'on' or 'off'")
    loss = LossConfig(
        margin=cfg["margin"],
        k=cfg["k"],
        fos_variant=cfg["fos"],
        sos_neighbor_mode=_mode(cfg["neighbor_mode"]),
    )
    return TrainConfig(
        optimizer=cfg["optimizer"],
        epochs=cfg["epochs"],
        pairs_per_batch=cfg["pairs_per_batch"],
        seed=cfg["seed"],
        enable_sosr=cfg["sosr"] == "on",
        dim=cfg["dim"],
        loss=loss,
        sgd_lr0=cfg["sgd_lr0"],
        sgd_decay_epoch=cfg["sgd_decay_epoch"],
        sgd_decay_factor=cfg["sgd_decay_factor"],
        adam_alpha=cfg["adam_alpha"],
        adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"],
        adam_eps=cfg["adam_eps"],
    )


def cmd_train(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _TRAIN_DEFAULTS, _TRAIN_CONVERTERS)
    _require(cfg, "data", "out")
    ds = load_descriptors(cfg["data"], normalize=True)
    table = EmbeddingTable.from_descriptor_set(ds)
    final, history = train(table, _train_config(cfg))
    trained = final.to_descriptor_set(provenance=f"trained embeddings from {cfg['data']}")
    trained.tags = ds.tags
    save_descriptors(trained, cfg["out"])
    history_path = cfg["out"] + ".history.csv"
    history.write_csv(history_path)
    outputs = [cfg["out"], cfg["out"] + ".json", history_path]
    if not getattr(ns, "no_plot", False) and len(history):
        from .plots import plot_history

        plot_path = cfg["out"] + ".history.png"
        plot_history(history, plot_path)
        outputs.append(plot_path)
    _write_manifest("train", cfg, cfg["seed"], [cfg["data"]], outputs, started, cfg["out"])
    print(f"trained {cfg['epochs']} epochs; wrote embeddings to {cfg['out']}")
    return 0


# ---------------------------------------------------------------- eval


_EVAL_DEFAULTS = {
    "data": None,
    "out": None,
    "n_pos": 1000,
    "n_neg": 1000,
    "recall": 0.95,
    "seed": 0,
}


def cmd_eval(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _EVAL_DEFAULTS, {
        "n_pos": int, "n_neg": int, "recall": float, "seed": int,
    })
    _require(cfg, "data", "out")
    ds = load_descriptors(cfg["data"])
    report = evaluate_descriptor_set(
        ds, n_pos=cfg["n_pos"], n_neg=cfg["n_neg"],
        seed=cfg["seed"], recall=cfg["recall"],
    )
    _write_json(cfg["out"], report.to_dict())
    outputs = [cfg["out"]]
    if not getattr(ns, "no_plot", False):
        from .plots import plot_distance_histograms

        pos, neg = build_verification_pairs(ds, cfg["n_pos"], cfg["n_neg"], cfg["seed"])
        pos_d = np.sqrt(np.sum((ds.vectors[pos[:, 0]] - ds.vectors[pos[:, 1]]) ** 2, axis=1))
        neg_d = np.sqrt(np.sum((ds.vectors[neg[:, 0]] - ds.vectors[neg[:, 1]]) ** 2, axis=1))
        tau = np.sort(pos_d)[math.ceil(cfg["recall"] * pos_d.size) - 1]
        plot_path = cfg["out"] + ".distances.png"
        plot_distance_histograms(pos_d, neg_d, plot_path, tau=float(tau))
        outputs.append(plot_path)
    _write_manifest("eval", cfg, cfg["seed"], [cfg["data"]], outputs, started, cfg["out"])
    print(f"fpr_at_95={report.fpr_at_95:.6f} verification_map={report.verification_map:.6f}")
    return 0


# ---------------------------------------------------------------- vmf-stats


_VMF_DEFAULTS = {
    "data": None,
    "out": None,
    "random_tests": 10000,
    "inter_mode": "random-tests",
    "seed": 0,
}


def cmd_vmf_stats(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _VMF_DEFAULTS, {"random_tests": int, "seed": int})
    _require(cfg, "data", "out")
    ds = load_descriptors(cfg["data"])
    stats = hypersphere_stats(
        ds.vectors, ds.labels,
        random_tests=cfg["random_tests"],
        seed=cfg["seed"],
        inter_mode=_mode(cfg["inter_mode"]),
    )
    _write_json(cfg["out"], stats.to_dict())
    outputs = [cfg["out"]]
    if not getattr(ns, "no_plot", False):
        from .plots import plot_vmf_stats

        plot_path = cfg["out"] + ".png"
        plot_vmf_stats(stats, plot_path)
        outputs.append(plot_path)
    _write_manifest("vmf-stats", cfg, cfg["seed"], [cfg["data"]], outputs, started, cfg["out"])
    print(
        f"r_intra={stats.r_intra:.6f} r_inter={stats.r_inter:.6f} rho={stats.rho:.6f}"
    )
    return 0


# ---------------------------------------------------------------- gradcheck


_GRADCHECK_DEFAULTS = {
    "out": None,
    "trials": 100,
    "batch_sizes": "4,8,16",
    "dims": "3,32,128",
    "h": 1e-5,
    "seed": 0,
}


def cmd_gradcheck(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _GRADCHECK_DEFAULTS, {"trials": int, "h": float, "seed": int})
    _require(cfg, "out")
    batch_sizes = _parse_int_list(cfg["batch_sizes"])
    dims = _parse_int_list(cfg["dims"])
    if not batch_sizes or not dims:
        raise ValidationError("batch sizes and dims must be non-empty")
    results = gradient_check_trials(
        trials=cfg["trials"],
        batch_sizes=tuple(batch_sizes),
        dims=tuple(dims),
        h=cfg["h"],
        seed=cfg["seed"],
    )
    max_err = max(r["max_rel_err"] for r in results)
    passed = max_err < GRADCHECK_THRESHOLD
    report = {
        "trials": results,
        "max_rel_err": max_err,
        "threshold": GRADCHECK_THRESHOLD,
        "passed": passed,
    }
    _write_json(cfg["out"], report)
    _write_manifest("gradcheck", cfg, cfg["seed"], [], [cfg["out"]], started, cfg["out"])
    print(f"gradcheck {'passed' if passed else 'FAILED'}: max_rel_err={max_err:.3e}")
    return 0 if passed else 2


# ---------------------------------------------------------------- sweep


_SWEEP_DEFAULTS = {
    "data": None,
    "out_dir": None,
    "n_grid": "256,512,1024,2048",
    "k_grid": "4,8,16,32",
    "epochs": 100,
    "optimizer": "adam",
    "fos": "qht",
    "sosr": "on",
    "margin": 1.0,
    "neighbor_mode": "same-side",
    "n_pos": 1000,
    "n_neg": 1000,
    "recall": 0.95,
    "seed": 0,
}


def _dedupe_grid(values: list[int], name: str) -> list[int]:
    unique = sorted(set(values))
    if len(unique) < len(values):
        print(f"warning: duplicate entries in {name} deduplicated", file=sys.stderr)
    return unique


def cmd_sweep(ns) -> int:
    started = time.monotonic()
    cfg = _resolve(ns, _SWEEP_DEFAULTS, {
        "epochs": int, "margin": float, "n_pos": int, "n_neg": int,
        "recall": float, "seed": int,
    })
    _require(cfg, "data", "out_dir")
    n_grid = _dedupe_grid(_parse_int_list(cfg["n_grid"]), "--n-grid")
    k_grid = _dedupe_grid(_parse_int_list(cfg["k_grid"]), "--k-grid")
    if not n_grid or not k_grid:
        raise ValidationError("sweep grids must be non-empty")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    ds = load_descriptors(cfg["data"], normalize=True)
    pos, neg = build_verification_pairs(ds, cfg["n_pos"], cfg["n_neg"], cfg["seed"])

    cells = []
    for n in n_grid:
        for k in k_grid:
            cell = {"n": n, "k": k, "fpr95": None, "error": None}
            try:
                train_cfg = _train_config({
                    **cfg,
                    "pairs_per_batch": n,
                    "k": k,
                    "dim": None,
                    "sgd_lr0": 0.01, "sgd_decay_epoch": 50, "sgd_decay_factor": 10.0,
                    "adam_alpha": 0.01, "adam_beta1": 0.9, "adam_beta2": 0.999,
                    "adam_eps": 1e-8,
                })
                table = EmbeddingTable.from_descriptor_set(ds)
                final, _ = train(table, train_cfg)
                # Round-trip through f32 so a cell matches train+eval via files.
                vecs = final.vectors.astype("<f4").astype(np.float64)
                pos_d = np.sqrt(np.sum((vecs[pos[:, 0]] - vecs[pos[:, 1]]) ** 2, axis=1))
                neg_d = np.sqrt(np.sum((vecs[neg[:, 0]] - vecs[neg[:, 1]]) ** 2, axis=1))
                cell["fpr95"] = fpr_at_recall(pos_d, neg_d, recall=cfg["recall"])
            except (ValidationError, NumericError) as exc:
                cell["error"] = str(exc)
                print(f"warning: cell N={n} K={k} failed: {exc}", file=sys.stderr)
            cells.append(cell)

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write("n,k,fpr95\n")
        for cell in cells:
            fpr = "" if cell["fpr95"] is None else repr(cell["fpr95"])
            fh.write(f"{cell['n']},{cell['k']},{fpr}\n")

    succeeded = [c for c in cells if c["fpr95"] is not None]
    argmin = None
    argmin_unique = False
    if succeeded:
        best = min(c["fpr95"] for c in succeeded)
        winners = [c for c in succeeded if c["fpr95"] == best]
        argmin = {"n": winners[0]["n"], "k": winners[0]["k"], "fpr95": best}
        argmin_unique = len(winners) == 1
    summary = {
        "cells": cells,
        "argmin": argmin,
        "argmin_unique": argmin_unique,
        "failed_cells": len(cells) - len(succeeded),
    }
    summary_path = out_dir / "sweep_summary.json"
    _write_json(summary_path, summary)
    outputs = [str(csv_path), str(summary_path)]
    if not getattr(ns, "no_plot", False) and succeeded:
        from .plots import plot_sweep

        plot_path = out_dir / "sweep.png"
        plot_sweep(cells, plot_path)
        outputs.append(str(plot_path))
    _write_manifest("sweep", cfg, cfg["seed"], [cfg["data"]], outputs, started, csv_path)
    if not succeeded:
        print("error: every sweep cell failed", file=sys.stderr)
        return 2
    if argmin is not None:
        uniq = "unique" if argmin_unique else "tied"
        print(
            f"argmin ({uniq}): N={argmin['n']} K={argmin['k']} "
            f"fpr95={argmin['fpr95']:.6f}"
        )
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p, with_plot=True):
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    if with_plot:
        p.add_argument("--no-plot", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sosd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sosd {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="generate a synthetic vMF-mixture dataset")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--kappa-intra", dest="kappa_intra", type=float, default=None)
    p.add_argument("--kappa-inter", dest="kappa_inter", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_common(p, with_plot=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="optimize free embeddings on a dataset")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pairs-per-batch", dest="pairs_per_batch", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--fos", choices=("ht", "qht"), default=None)
    p.add_argument("--sosr", choices=("on", "off"), default=None)
    p.add_argument(
        "--neighbor-mode", dest="neighbor_mode",
        choices=("same-side", "full-batch"), default=None,
    )
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--sgd-lr0", dest="sgd_lr0", type=float, default=None)
    p.add_argument("--sgd-decay-epoch", dest="sgd_decay_epoch", type=int, default=None)
    p.add_argument("--sgd-decay-factor", dest="sgd_decay_factor", type=float, default=None)
    p.add_argument("--adam-alpha", dest="adam_alpha", type=float, default=None)
    p.add_argument("--adam-beta1", dest="adam_beta1", type=float, default=None)
    p.add_argument("--adam-beta2", dest="adam_beta2", type=float, default=None)
    p.add_argument("--adam-eps", dest="adam_eps", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate matching metrics on a dataset")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--n-pos", dest="n_pos", type=int, default=None)
    p.add_argument("--n-neg", dest="n_neg", type=int, default=None)
    p.add_argument("--recall", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("vmf-stats", help="hypersphere-utilization statistics")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--random-tests", dest="random_tests", type=int, default=None)
    p.add_argument(
        "--inter-mode", dest="inter_mode",
        choices=("random-tests", "direct-mean"), default=None,
    )
    _add_common(p)
    p.set_defaults(func=cmd_vmf_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--out", default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--batch-sizes", dest="batch_sizes", default=None)
    p.add_argument("--dims", default=None)
    p.add_argument("--h", type=float, default=None)
    _add_common(p, with_plot=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="N/K grid of train+eval cells")
    p.add_argument("--data", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--n-grid", dest="n_grid", default=None)
    p.add_argument("--k-grid", dest="k_grid", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    p.add_argument("--fos", choices=("ht", "qht"), default=None)
    p.add_argument("--sosr", choices=("on", "off"), default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument(
        "--neighbor-mode", dest="neighbor_mode",
        choices=("same-side", "full-batch"), default=None,
    )
    p.add_argument("--n-pos", dest="n_pos", type=int, default=None)
    p.add_argument("--n-neg", dest="n_neg", type=int, default=None)
    p.add_argument("--recall", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return ns.func(ns)
    except DescriptorFileError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
