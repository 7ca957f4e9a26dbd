"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import continual as ct
from . import data as dt
from . import harness as hs
from . import plots as pl
from . import tokenset as tks
from .errors import ContractError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _words(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# flags that map onto config fields: (flag, section, field, type)
CONFIG_FLAGS = [
    ("--source", "dataset", "source", str),
    ("--classes", "dataset", "classes", int),
    ("--train-per-class", "dataset", "train_per_class", int),
    ("--test-per-class", "dataset", "test_per_class", int),
    ("--noise", "dataset", "noise", float),
    ("--data-seed", "dataset", "data_seed", int),
    ("--train-cache", "dataset", "train_cache", str),
    ("--test-cache", "dataset", "test_cache", str),
    ("--classes-per-task", "split", "classes_per_task", int),
    ("--embed-dim", "model", "embed_dim", int),
    ("--heads", "model", "heads", int),
    ("--blocks", "model", "blocks", int),
    ("--checkpoint", "model", "checkpoint", str),
    ("--epochs", "train", "epochs", int),
    ("--batch-size", "train", "batch_size", int),
    ("--lr", "train", "lr", float),
    ("--drop-rate", "train", "drop_rate", float),
    ("--replay-ratio", "train", "replay_ratio", float),
    ("--optimizer", "train", "optimizer", str),
    ("--workers", "output", "workers", int),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config; flags override its fields")
    for flag, _, _, kind in CONFIG_FLAGS:
        p.add_argument(flag, type=kind, default=None)
    p.add_argument("--weighted-replay", action="store_true", default=None)


def _config(args) -> hs.ExperimentConfig:
    try:
        cfg = hs.ExperimentConfig.load(args.config) if args.config else hs.ExperimentConfig()
        for flag, section, name, _ in CONFIG_FLAGS:
            value = getattr(args, flag[2:].replace("-", "_"))
            if value is not None:
                cfg = cfg.replace(section, **{name: value})
        if args.weighted_replay:
            cfg = cfg.replace("train", weighted_replay=True)
        grid = {}
        for attr, key in (("policies", "policies"), ("coreset_methods", "coreset_methods"),
                          ("token_methods", "token_methods"), ("rates", "rates"), ("seeds", "seeds")):
            value = getattr(args, attr, None)
            if value is not None:
                grid[key] = value
        if grid:
            cfg = cfg.replace("grid", **grid)
        if getattr(args, "out", None):
            cfg = cfg.replace("output", out=args.out)
        cfg.validate()
        return cfg
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# verbs ---------------------------------------------------------------------

def cmd_ingest(args) -> int:
    try:
        ds = dt.load_idx(args.images, args.labels)
    except (FormatError, OSError) as exc:
        raise DataError(str(exc)) from exc
    dt.save_cache(args.out, ds)
    print(f"{len(ds)} images of shape {ds.images.shape[1:]} written to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        ds = dt.gen_synthetic(args.classes, args.per_class, args.seed, noise=args.noise)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    dt.save_cache(args.out, ds)
    if args.idx_prefix:
        pixels = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
        dt.write_idx(f"{args.idx_prefix}-images.idx", pixels)
        dt.write_idx(f"{args.idx_prefix}-labels.idx", ds.labels.astype(np.uint8))
    print(f"{len(ds)} synthetic images ({args.classes} classes) written to {args.out}")
    return EXIT_OK


def _policy(args) -> ct.BufferPolicy:
    try:
        return ct.BufferPolicy(args.policy, args.R, coreset_method=args.coreset_method,
                               token_method=args.token_method)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _config(args)
    cell = hs.Cell(_policy(args), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = _stream(cfg, args.seed)
    record = hs.run_cell(cfg, cell, stream, buffer_dir=out / "buffers", model_path=out / "model.tok")
    (out / "run.json").write_text(record.to_json())
    hs.write_reports(out, [record], plots=cfg.output.plots)
    r = record.row
    print(f"{r.method} R={r.R:g} seed={r.seed}: avg_acc={r.avg_acc:.4f} forgetting={r.forgetting:.4f} "
          f"stored_tokens={r.stored_token_count}")
    return EXIT_OK


def _stream(cfg, seed):
    try:
        return hs.make_stream(cfg, seed)
    except (FormatError, OSError) as exc:
        raise DataError(str(exc)) from exc
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_grid(args) -> int:
    cfg = _config(args)
    _stream(cfg, cfg.grid.seeds[0])
    result = hs.run_experiment(cfg, resume=args.resume, log=print)
    print(f"{len(result.records)} runs recorded ({result.skipped} resumed), {len(result.failures)} failed; "
          f"reports in {cfg.output.out}")
    return EXIT_RUN if result.failures else EXIT_OK


def cmd_plot(args) -> int:
    runs = sorted(Path(args.results).glob("runs/*.json"))
    if not runs:
        raise DataError(f"no run records under {args.results}/runs")
    try:
        records = [hs.RunRecord.from_json(p.read_text()) for p in runs]
    except FormatError as exc:
        raise DataError(str(exc)) from exc
    for path in pl.emit_plots(records, args.out or args.results):
        print(path)
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        buf = tks.deserialize(args.buffer)
    except (FormatError, OSError) as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tks.export_buffer_csv(out / "buffer.csv", buf)
    T = buf.num_patches
    side = int(round(np.sqrt(T)))
    counts = np.zeros(T)
    for e in buf.entries:
        counts[e.positions.astype(np.int64) - 1] += 1
    grid = counts.reshape(side, side) if side * side == T else counts[None, :]
    (out / "positions.svg").write_text(pl.heatmap(grid, f"selection count per patch ({len(buf)} entries)"))
    shown = buf.entries[: args.max_entries]
    if shown:
        rows = np.zeros((len(shown), T))
        for i, e in enumerate(shown):
            rows[i, e.positions.astype(np.int64) - 1] = 1.0
        (out / "entries.svg").write_text(pl.heatmap(rows, "stored positions per entry", cell=12))
    summary = {"entries": len(buf), "tokens_per_entry": buf.tokens_per_entry,
               "stored_tokens": buf.stored_token_count, "budget_limit": buf.budget_limit(),
               "R": buf.R, "s": buf.s, "t": buf.t, "coreset_method": buf.coreset_method,
               "token_method": buf.token_method, "pool_size": buf.pool_size}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coretokens", description="Token-level data summaries for replay.")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("ingest", help="convert an IDX image/label pair to a dataset cache")
    q.add_argument("--images", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_ingest)

    q = sub.add_parser("synth", help="generate the synthetic shape dataset")
    q.add_argument("--classes", type=int, default=10)
    q.add_argument("--per-class", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--noise", type=float, default=0.1)
    q.add_argument("--out", required=True)
    q.add_argument("--idx-prefix", help="also write <prefix>-images.idx and <prefix>-labels.idx")
    q.set_defaults(fn=cmd_synth)

    q = sub.add_parser("train", help="run one policy over the task sequence")
    _add_config_flags(q)
    q.add_argument("--policy", default="core-tokenset", choices=ct.POLICIES)
    q.add_argument("--R", type=float, default=0.1)
    q.add_argument("--coreset-method", default="gradmatch")
    q.add_argument("--token-method", default="gradlrp")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("grid", help="run a grid of policies, rates and seeds")
    _add_config_flags(q)
    q.add_argument("--policies", type=_words)
    q.add_argument("--coreset-methods", dest="coreset_methods", type=_words)
    q.add_argument("--token-methods", dest="token_methods", type=_words)
    q.add_argument("--rates", type=_floats)
    q.add_argument("--seed", dest="seeds", type=_ints, required=True, help="comma-separated seeds")
    q.add_argument("--out", required=True)
    q.add_argument("--resume", action=argparse.BooleanOptionalAction, required=True,
                   help="skip cells whose result file exists (--no-resume re-runs everything)")
    q.set_defaults(fn=cmd_grid)

    q = sub.add_parser("plot", help="redraw the SVG charts from a results directory")
    q.add_argument("--results", required=True)
    q.add_argument("--out")
    q.set_defaults(fn=cmd_plot)

    q = sub.add_parser("inspect-buffer", help="dump a stored buffer as CSV and SVG heatmaps")
    q.add_argument("--buffer", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--max-entries", type=int, default=64)
    q.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a failed run
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
