"""Command-line entry point: generate, train, eval, ood, baseline, adapt, report.

Every command writes into a run directory that carries its own manifest.json.
The default output root is $DYNASUB_RUN_DIR (or ./runs).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baselines, controller, oodreg
from .metrics import MetricsReport, silhouette
from .trainer import (Checkpoint, DivergenceError, RunConfig, build_dataset, train,
                      write_log_csv)

CHECKPOINT_NAME = "checkpoint.json"
LOSS_COLUMNS = ("recon", "kl", "contrast", "ortho", "vae_total", "nll", "kl_assign", "split",
                "entropy", "usage", "kl_balance", "aug", "subgroup_total", "val_recon")
SUMMARY_COLUMNS = ("run", "method", "dataset", "seed", "id_accuracy", "class_ood_accuracy", "nmi",
                   "ari", "regret_precision", "flagged_id_fraction", "auroc", "fpr_at_95",
                   "cluster_accuracy", "cluster_count")


class CliError(Exception):
    pass


def config_hash(config: RunConfig) -> str:
    """Git-style blob hash of the canonical JSON config."""
    body = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _root() -> Path:
    return Path(os.environ.get("DYNASUB_RUN_DIR", "runs"))


def write_manifest(run_dir: Path, command: str, config: RunConfig, artifacts: dict, started: str,
                   extra: dict | None = None):
    doc = {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seeds": [config.seed],
        "artifacts": {k: str(Path(v).name) for k, v in artifacts.items()},
        "started": started,
        "finished": _now(),
    }
    if extra:
        doc.update(extra)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def load_config(path, overrides: argparse.Namespace) -> RunConfig:
    d = {}
    if path:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {path}: {exc}")
        if not isinstance(d, dict):
            raise CliError(f"config {path} must be a JSON object")
    for key, attr in (("seed", "seed"), ("dataset", "dataset"), ("dropped_class", "drop_class"),
                      ("margin", "margin")):
        v = getattr(overrides, attr, None)
        if v is not None:
            d[key] = v
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config: {exc}")


def _resolve_checkpoint(target) -> tuple[Path, Checkpoint]:
    p = Path(target)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.exists():
        raise CliError(f"checkpoint not found: {p} (run `dynasub train` first)")
    try:
        return p, Checkpoint.load(p)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"unreadable checkpoint {p}: {exc}")


def _check_dataset(args, ckpt: Checkpoint):
    ds = getattr(args, "dataset", None)
    if ds is not None and ds != ckpt.config.dataset:
        raise CliError(f"checkpoint was trained on {ckpt.config.dataset!r}, not {ds!r}")
    drop = getattr(args, "drop_class", None)
    if drop is not None and ckpt.config.dropped_class is not None and drop != ckpt.config.dropped_class:
        raise CliError(f"checkpoint held out class {ckpt.config.dropped_class}, not {drop}")


def _require_finite(metrics: MetricsReport):
    bad = [k for k, v in metrics.to_dict().items()
           if isinstance(v, float) and not math.isfinite(v)]
    if bad:
        raise CliError(f"non-finite metrics: {bad}")


def latent_projection(Z_c) -> np.ndarray:
    """First two principal-component coordinates of Z_c."""
    Z_c = np.asarray(Z_c, dtype=np.float64)
    centered = Z_c - Z_c.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def evaluate_run(run_dir: Path, ckpt: Checkpoint, split: str = "test", margin=None,
                 tag: str = "") -> tuple[MetricsReport, dict]:
    """Fit the downstream classifier, score a split and write metrics, regret and latent CSVs."""
    config = ckpt.config
    model = ckpt.best_model()
    ds = build_dataset(config)
    x_tr, y_tr, _ = ds.part("train")
    x, y, ood = ds.part(split)
    if len(x) == 0:
        raise CliError(f"split {split!r} is empty")
    clf = oodreg.fit_classifier(model.embed(x_tr).Z_dec, y_tr, config, seed=config.seed)
    report = oodreg.ood_scores(model, clf, x, margin=margin, is_ood=ood)
    metrics = oodreg.evaluate(report, y, ood)
    e = model.embed(x)
    metrics.silhouette = silhouette(e.Z_c, e.C)
    metrics.run = "dynasub"
    _require_finite(metrics)
    arts = {}
    arts[f"metrics{tag}_json"] = run_dir / f"metrics{tag}.json"
    arts[f"metrics{tag}_csv"] = run_dir / f"metrics{tag}.csv"
    arts[f"regret{tag}"] = run_dir / f"regret{tag}.csv"
    arts["latent_pca"] = run_dir / "latent_pca.csv"
    metrics.to_json(arts[f"metrics{tag}_json"])
    metrics.to_csv(arts[f"metrics{tag}_csv"])
    report.to_csv(arts[f"regret{tag}"])
    proj = latent_projection(e.Z_c)
    _write_rows(arts["latent_pca"], ["sample_id", "pc1", "pc2", "cluster", "label", "is_ood"],
                [[i, repr(float(a)), repr(float(b)), int(c), int(l), int(o)]
                 for i, ((a, b), c, l, o) in enumerate(zip(proj, e.C, y, ood))])
    return metrics, arts


def write_training_artifacts(run_dir: Path, ckpt: Checkpoint) -> dict:
    arts = {"checkpoint": run_dir / CHECKPOINT_NAME, "train_log": run_dir / "train_log.csv",
            "edits": run_dir / "edits.jsonl", "k_per_epoch": run_dir / "k_per_epoch.csv",
            "loss_curves": run_dir / "loss_curves.csv"}
    ckpt.save(arts["checkpoint"])
    write_log_csv(arts["train_log"], ckpt.log)
    edits = [controller.Edit(**e) for e in (ckpt.controller or {}).get("edits", [])]
    controller.write_edit_log(arts["edits"], edits)
    _write_rows(arts["k_per_epoch"], ["epoch", "K"], [[r["epoch"], r["K"]] for r in ckpt.log])
    _write_rows(arts["loss_curves"], ["epoch", *LOSS_COLUMNS],
                [[r["epoch"], *("" if r.get(c) is None else r.get(c) for c in LOSS_COLUMNS)]
                 for r in ckpt.log])
    return arts


# ---- commands -------------------------------------------------------------

def cmd_generate(args) -> int:
    started = _now()
    config = load_config(args.config, args)
    ds = build_dataset(config)
    run_dir = Path(args.out) if args.out else _root() / f"data-{config.dataset}-s{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    arts = {"data": run_dir / "data.csv"}
    ds.to_csv(arts["data"])
    write_manifest(run_dir, "generate", config, arts, started,
                   {"dropped_class": ds.dropped_class, "rows": len(ds)})
    print(run_dir)
    return 0


def cmd_train(args) -> int:
    started = _now()
    config = load_config(args.config, args)
    run_dir = Path(args.out) if args.out else \
        _root() / f"{config.dataset}-s{config.seed}-{config_hash(config)[:8]}"
    run_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:3d}  K={row['K']:2d}  val_recon={row['val_recon']:.4f}"
                  f"  vae={row.get('vae_total', 0.0):.4f}  sub={row.get('subgroup_total', 0.0):.4f}"
                  f"{'  *' if row['best'] else ''}", file=sys.stderr, flush=True)

    try:
        ckpt, _ = train(config, progress=progress)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.save(run_dir / "diverged_checkpoint.json")
        raise CliError(f"training diverged: {exc}")
    arts = write_training_artifacts(run_dir, ckpt)
    metrics, ev = evaluate_run(run_dir, ckpt)
    arts.update(ev)
    write_manifest(run_dir, "train", config, arts, started, {"best_epoch": ckpt.best_epoch})
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    path, ckpt = _resolve_checkpoint(args.run)
    _check_dataset(args, ckpt)
    run_dir = Path(args.out) if args.out else path.parent / f"eval-{args.split}"
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics, arts = evaluate_run(run_dir, ckpt, split=args.split)
    write_manifest(run_dir, "eval", ckpt.config, arts, started,
                   {"checkpoint": str(path), "split": args.split})
    print(json.dumps({k: metrics.to_dict()[k] for k in ("id_accuracy", "nmi", "ari",
                                                        "class_ood_accuracy")}))
    return 0


def cmd_ood(args) -> int:
    started = _now()
    path, ckpt = _resolve_checkpoint(args.run)
    _check_dataset(args, ckpt)
    margin = ckpt.config.margin if args.margin is None else args.margin
    run_dir = Path(args.out) if args.out else path.parent / f"ood-m{margin:g}"
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics, arts = evaluate_run(run_dir, ckpt, margin=margin)
    write_manifest(run_dir, "ood", ckpt.config, arts, started,
                   {"checkpoint": str(path), "margin": margin})
    print(json.dumps({k: metrics.to_dict()[k] for k in ("class_ood_accuracy", "regret_precision",
                                                        "auroc", "flagged_id_fraction")}))
    return 0


def cmd_baseline(args) -> int:
    started = _now()
    path, ckpt = _resolve_checkpoint(args.run)
    _check_dataset(args, ckpt)
    if args.method not in ("kmeanspp", "gmm", "self"):
        raise CliError(f"unknown method {args.method!r}; choose kmeanspp, gmm or self")
    config = ckpt.config
    if args.margin is not None:
        config = RunConfig.from_dict({**config.to_dict(), "margin": args.margin})
    run_dir = Path(args.out) if args.out else path.parent / f"baseline-{args.method}"
    run_dir.mkdir(parents=True, exist_ok=True)
    model = ckpt.best_model()
    try:
        report, metrics = baselines.swap_in_eval(model, build_dataset(config), args.method, k=args.k,
                                                 config=config, seed=config.seed)
    except ValueError as exc:
        raise CliError(str(exc))
    _require_finite(metrics)
    arts = {"metrics_json": run_dir / "metrics.json", "metrics_csv": run_dir / "metrics.csv",
            "regret": run_dir / "regret.csv"}
    metrics.to_json(arts["metrics_json"])
    metrics.to_csv(arts["metrics_csv"])
    report.to_csv(arts["regret"])
    write_manifest(run_dir, "baseline", config, arts, started,
                   {"checkpoint": str(path), "method": args.method, "k": args.k})
    print(json.dumps({k: metrics.to_dict()[k] for k in ("class_ood_accuracy", "regret_precision")}))
    return 0


def cmd_adapt(args) -> int:
    started = _now()
    path, ckpt = _resolve_checkpoint(args.run)
    _check_dataset(args, ckpt)
    config = ckpt.config
    run_dir = Path(args.out) if args.out else path.parent / "adapt"
    run_dir.mkdir(parents=True, exist_ok=True)
    model = ckpt.best_model()
    ds = build_dataset(config)
    x_tr, y_tr, _ = ds.part("train")
    clf = oodreg.fit_classifier(model.embed(x_tr).Z_dec, y_tr, config, seed=config.seed)
    result = oodreg.continual_experiment(model, clf, ds, config, seed=config.seed)
    arts = {"adapt": run_dir / "adapt.json", "metrics_csv": run_dir / "metrics.csv"}
    with open(arts["adapt"], "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    d = result.to_dict()
    _write_rows(arts["metrics_csv"], list(d), [["" if v is None else v for v in d.values()]])
    write_manifest(run_dir, "adapt", config, arts, started, {"checkpoint": str(path)})
    print(json.dumps(d))
    if result.new_cluster is None:
        print(f"warning: only {result.buffer_size} rows flagged; buffer threshold "
              f"{config.ood_buffer_threshold} not reached, no update performed", file=sys.stderr)
    return 0


def _read_run(run_dir: Path) -> dict:
    man_path, met_path = run_dir / "manifest.json", run_dir / "metrics.json"
    if not man_path.exists() or not met_path.exists():
        raise CliError(f"{run_dir} is not an evaluated run directory (manifest.json/metrics.json missing)")
    with open(man_path) as fh:
        man = json.load(fh)
    with open(met_path) as fh:
        met = json.load(fh)
    method = man.get("method") or "dynasub"
    row = {"run": str(run_dir), "method": method, "dataset": man["config"]["dataset"],
           "seed": man["config"]["seed"]}
    row.update({c: met.get(c) for c in SUMMARY_COLUMNS[4:]})
    return row


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    with ThreadPoolExecutor(max_workers=min(8, len(runs))) as pool:
        rows = list(pool.map(_read_run, runs))
    out = Path(args.out) if args.out else _root() / "summary.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out, list(SUMMARY_COLUMNS),
                [["" if r.get(c) is None else r.get(c) for c in SUMMARY_COLUMNS] for r in rows])
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynasub", description="Dynamic subgrouping VAE with regret-based OOD detection")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", help="JSON file of RunConfig keys")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (file for report)")
        sp.add_argument("--dataset", choices=("blobs", "moons", "circles"))
        sp.add_argument("--drop-class", type=int, dest="drop_class")

    sp = sub.add_parser("generate", help="write a dataset CSV")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a model and evaluate it on the test split")
    common(sp)
    sp.add_argument("--margin", type=float)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("run", help="run directory or checkpoint file")
    common(sp, with_config=False)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ood", help="regret scoring at a given margin")
    sp.add_argument("run")
    common(sp, with_config=False)
    sp.add_argument("--margin", type=float)
    sp.set_defaults(func=cmd_ood)

    sp = sub.add_parser("baseline", help="swap in an external clusterer")
    sp.add_argument("run")
    common(sp, with_config=False)
    sp.add_argument("--method", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--margin", type=float)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("adapt", help="continual update from flagged test rows")
    sp.add_argument("run")
    common(sp, with_config=False)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("report", help="merge evaluated runs into one summary CSV")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dynasub {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"dynasub {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
