"""Command line: generate worlds, train, evaluate checkpoints, run ablation grids.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import WORLD_KEYS, ConfigError, RunConfig, env_overrides, load_config, parse_config_text
from .model import load_checkpoint, save_checkpoint
from .netcore import NumericalError
from .synthworld import (
    DatasetSnapshot,
    SnapshotFormatError,
    generate_dataset,
    load_snapshot,
    save_snapshot,
    snapshot_hash,
)
from .trainer import (
    PRESET_GRIDS,
    AblationRun,
    ablate,
    aggregate,
    aggregate_csv,
    cell_overrides,
    evaluate,
    reports_csv,
    run_training,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST, METRICS, CHECKPOINT = "manifest.jsonl", "metrics.csv", "checkpoint.jsonl"
RUNS, AGGREGATE = "runs.csv", "aggregate.csv"

log = logging.getLogger("dapsearch")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _draw_seed() -> int:
    return secrets.randbelow(2 ** 31)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_manifest(path: Path, record: dict):
    path.write_text(_json_line(record) + "\n", encoding="utf-8")


def _append_manifest(path: Path, record: dict):
    with path.open("a", encoding="utf-8") as fh:
        fh.write(_json_line(record) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_data(path: str) -> DatasetSnapshot:
    try:
        return load_snapshot(path)
    except FileNotFoundError:
        raise DataError(f"snapshot not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read snapshot {path}: {exc.strerror}") from None
    except SnapshotFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _check_world(run: RunConfig, snap: DatasetSnapshot, explicit: set[str]):
    """World keys set in the config must agree with the snapshot's own header."""
    for key in sorted(explicit & set(WORLD_KEYS)):
        if getattr(run.world, key) != getattr(snap.config, key):
            raise DataError(f"config/snapshot mismatch on {key}: config {getattr(run.world, key)!r}, "
                            f"snapshot {getattr(snap.config, key)!r}")


def _explicit_keys(args) -> set[str]:
    """Keys the user set, from file or environment."""
    keys = set(env_overrides(os.environ))
    if getattr(args, "config", None):
        keys |= set(parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config))
    return keys


def _progress(rep):
    m = rep.metrics
    extra = f" map={m['map']:.4f} top1={m['top1']:.4f}" if m else ""
    log.info("epoch %d clusters=%d outliers=%d hard=%d%s", rep.epoch, rep.n_clusters, rep.n_outliers,
             rep.n_hard, extra)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    seed = _draw_seed() if args.seed is None else args.seed
    run = load_config(args.config)
    snap = generate_dataset(run.world, seed)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_snapshot(snap, out)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    manifest = out.with_name(out.stem + ".manifest.jsonl")
    _write_manifest(manifest, {"command": "generate", "config_path": args.config, "config": asdict(run.world),
                               "seed": seed, "snapshot_hash": snapshot_hash(snap),
                               "outputs": {"snapshot": str(out)}})
    n_ids = len({int(i) for split in (snap.source_train, snap.target_train, snap.target_test)
                 for sc in split for i in sc.identities})
    print(f"wrote {out}: {len(snap.source_train)} source, {len(snap.target_train)} target, "
          f"{len(snap.target_test)} test scenes; {n_ids} identities; {len(snap.queries)} queries; seed {seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    snap = _load_data(args.data)
    seed = _draw_seed() if args.seed is None else args.seed
    run = load_config(args.config, overrides={"seed": seed})
    _check_world(run, snap, _explicit_keys(args))
    out = _out_dir(args.out)
    paths = {"manifest": str(out / MANIFEST), "metrics": str(out / METRICS), "checkpoint": str(out / CHECKPOINT)}
    started = time.time()
    _write_manifest(out / MANIFEST, {"command": "train", "config_path": args.config,
                                     "config": asdict(run.train), "seed": seed, "data": args.data,
                                     "snapshot_hash": snapshot_hash(snap), "outputs": paths})
    result = run_training(snap, run.train, _progress)
    (out / METRICS).write_text(reports_csv(result.reports), encoding="utf-8")
    save_checkpoint(result.model, out / CHECKPOINT, {"seed": seed, "snapshot_hash": snapshot_hash(snap)})
    _append_manifest(out / MANIFEST, {"status": "complete", "wall_clock_s": round(time.time() - started, 3)})
    m = result.final_metrics
    print(f"map={m['map']:.4f} top1={m['top1']:.4f} recall={m['recall']:.4f} ap={m['ap']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    snap = _load_data(args.data)
    try:
        model = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if model.dim != snap.dim:
        raise DataError(f"checkpoint expects {model.dim}-d features, snapshot has {snap.dim}")
    overrides = {} if args.seed is None else {"seed": args.seed}
    run = load_config(args.config, overrides=overrides)
    m = evaluate(model, snap, run.train)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["map", "top1", "recall", "ap"])
    writer.writerow([f"{m[k]:.6f}" for k in ("map", "top1", "recall", "ap")])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def parse_grid(spec: str) -> dict[str, dict]:
    """A preset name, or comma-separated cells of '+'-joined flags ('baseline' is the empty cell)."""
    if spec in PRESET_GRIDS:
        return PRESET_GRIDS[spec]
    grid = {}
    for cell in (c.strip() for c in spec.split(",")):
        if not cell:
            continue
        flags = [] if cell == "baseline" else cell.split("+")
        try:
            grid[cell] = cell_overrides(flags)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if not grid:
        raise UsageError("empty ablation grid")
    return grid


def parse_seeds(spec: str) -> list[int]:
    try:
        if "," in spec or spec.strip().startswith("["):
            seeds = [int(s) for s in spec.strip("[]").split(",") if s.strip()]
        else:
            seeds = list(range(int(spec)))
    except ValueError:
        raise UsageError(f"bad seed list {spec!r}") from None
    if not seeds:
        raise UsageError("no seeds given")
    return seeds


def cmd_ablate(args) -> int:
    grid = parse_grid(args.grid)
    seeds = parse_seeds(args.seeds)
    run = load_config(args.config)
    if args.data:
        snap = _load_data(args.data)
        _check_world(run, snap, _explicit_keys(args))
        source, data_hash = snap, snapshot_hash(snap)
    else:
        source, data_hash = (lambda s: generate_dataset(run.world, s)), None
    out = _out_dir(args.out)
    started = time.time()
    _write_manifest(out / MANIFEST, {"command": "ablate", "config_path": args.config, "config": run.echo(),
                                     "grid": args.grid, "cells": list(grid), "seeds": seeds, "data": args.data,
                                     "snapshot_hash": data_hash,
                                     "outputs": {"runs": str(out / RUNS), "aggregate": str(out / AGGREGATE)}})
    runs: list[AblationRun] = []
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["cell", "seed", "map", "top1", "recall", "ap", "n_qualified"])

    def record(r: AblationRun):
        log.info("cell %s seed %d map=%.4f", r.cell, r.seed, r.metrics["map"])
        writer.writerow([r.cell, r.seed] + [f"{r.metrics[k]:.6f}" for k in ("map", "top1", "recall", "ap")]
                        + [r.n_qualified])
        runs.append(r)

    ablate(source, grid, seeds, run.train, on_run=record)
    (out / RUNS).write_text(rows.getvalue(), encoding="utf-8")
    (out / AGGREGATE).write_text(aggregate_csv(aggregate(runs)), encoding="utf-8")
    _append_manifest(out / MANIFEST, {"status": "complete", "wall_clock_s": round(time.time() - started, 3)})
    sys.stdout.write((out / AGGREGATE).read_text(encoding="utf-8"))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dapsearch", description="Domain-adaptive person search on a synthetic two-domain world.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a world snapshot")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--out", required=True, help="snapshot path (.jsonl)")
    g.add_argument("--seed", type=int, help="root seed (drawn and recorded if omitted)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and write a run directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="snapshot path")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the target test split")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, help="proposal seed (defaults to the config's)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run a component grid over seeds")
    a.add_argument("--config")
    a.add_argument("--data", help="shared snapshot; omitted = one generated world per seed")
    a.add_argument("--grid", required=True,
                   help=f"preset ({', '.join(PRESET_GRIDS)}) or cells like 'baseline,DAM,DAM+DC'")
    a.add_argument("--seeds", default="5", help="count N (seeds 0..N-1) or a list '0,3,7'")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dapsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dapsearch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"dapsearch: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
