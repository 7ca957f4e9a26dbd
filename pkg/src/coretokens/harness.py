"""Experiment configuration, grid orchestration and result files.

A config is an INI file with the sections ``dataset``, ``split``, ``model``,
``train``, ``grid`` and ``output``.  Every grid cell (one buffer policy and
one seed) is a pure function of the config, so its result file is keyed by
a hash of the config fields that affect it and re-runs skip finished cells.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

from . import continual as ct
from . import data as dt
from . import tokenset as tks
from .errors import ContractError, FormatError
from .vit import ModelConfig, PatchConfig, ViT

SECTIONS = ("dataset", "split", "model", "train", "grid", "output")


@dataclass
class DatasetSpec:
    # "synthetic" generates shapes; "idx" reads four IDX files; "cache" reads two npz caches
    source: str = "synthetic"
    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.1
    # None ties the generator seed to the run seed
    data_seed: int | None = None
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_cache: str = ""
    test_cache: str = ""


@dataclass
class SplitSpec:
    classes_per_task: int = 2
    order: list[int] = field(default_factory=list)


@dataclass
class ModelSpec:
    embed_dim: int = 32
    heads: int = 2
    blocks: int = 2
    mlp_ratio: int = 4
    image_side: int = 28
    patch_side: int = 7
    checkpoint: str = ""


@dataclass
class TrainSpec:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    drop_rate: float | None = None
    replay_ratio: float = 1.0
    weighted_replay: bool = False
    optimizer: str = "adam"
    momentum: float = 0.9


@dataclass
class GridSpec:
    policies: list[str] = field(default_factory=lambda: list(tks.FAMILIES))
    coreset_methods: list[str] = field(default_factory=lambda: ["gradmatch"])
    token_methods: list[str] = field(default_factory=lambda: ["gradlrp"])
    rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.4])
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class OutputSpec:
    out: str = "results"
    workers: int = 1
    plots: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, g = self.dataset, self.grid
        if d.source not in ("synthetic", "idx", "cache"):
            raise ContractError(f"dataset source must be synthetic, idx or cache, got {d.source!r}")
        if d.source == "idx" and not all([d.train_images, d.train_labels, d.test_images, d.test_labels]):
            raise ContractError("idx datasets need train_images, train_labels, test_images and test_labels")
        if d.source == "cache" and not (d.train_cache and d.test_cache):
            raise ContractError("cache datasets need train_cache and test_cache")
        for p in g.policies:
            if p not in ct.POLICIES:
                raise ContractError(f"unknown policy {p!r}; expected one of {ct.POLICIES}")
        for r in g.rates:
            if not 0 < r <= 1:
                raise ContractError(f"retention rates must lie in (0, 1], got {r}")
        if not g.seeds:
            raise ContractError("the grid needs at least one seed")
        if self.output.workers < 1:
            raise ContractError("workers must be at least 1")
        if self.model.embed_dim % self.model.heads:
            raise ContractError(f"embed_dim {self.model.embed_dim} not divisible by heads {self.model.heads}")
        ct.TrainConfig(epochs=self.train.epochs, batch_size=self.train.batch_size, lr=self.train.lr,
                       drop_rate=self.train.drop_rate, optimizer=self.train.optimizer)

    # INI round trip ------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            spec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in parser[name].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ContractError(f"cannot parse config: {exc}") from exc
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name in SECTIONS:
            spec_cls = type(getattr(cls(), name))
            values = dict(parser[name]) if parser.has_section(name) else {}
            parts[name] = _parse_spec(spec_cls, values, name)
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def replace(self, section: str, **values) -> "ExperimentConfig":
        """Copy with fields of one section changed."""
        new = dataclasses.replace(getattr(self, section), **values)
        return dataclasses.replace(self, **{section: new})


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ContractError(f"{key}: expected {kind}, got {raw!r}") from exc
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ContractError(f"{key}: expected a boolean, got {raw!r}")
    return raw


_KINDS = {"int": "int", "float": "float", "bool": "bool", "str": "str"}


def _parse_spec(spec_cls, values: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(spec_cls)}
    out = {}
    for key, raw in values.items():
        if key not in fields:
            raise ContractError(f"[{section}] has no field {key!r}; expected one of {sorted(fields)}")
        ann = str(fields[key].type).replace(" ", "")
        name = f"{section}.{key}"
        optional = "|None" in ann
        if optional and raw.strip().lower() in ("none", ""):
            out[key] = None
            continue
        base = ann.replace("|None", "")
        if base.startswith("list["):
            inner = _KINDS[base[5:-1]]
            out[key] = [_parse_scalar(inner, v, name) for v in raw.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(_KINDS[base], raw, name)
    return spec_cls(**out)


# grid cells ----------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    policy: ct.BufferPolicy
    seed: int

    @property
    def label(self) -> str:
        return f"{self.policy.name} R={self.policy.R!r} seed={self.seed}"


def expand_grid(cfg: ExperimentConfig) -> list[Cell]:
    """One cell per policy variant, rate and seed; naive and cumulative ignore the rate."""
    g = cfg.grid
    policies = []
    for kind in g.policies:
        if kind in ("naive", "cumulative"):
            policies.append(ct.BufferPolicy(kind, 1.0))
            continue
        cs = g.coreset_methods if kind in ("coreset", "core-tokenset") else ["gradmatch"]
        tk = g.token_methods if kind in ("core-tokens", "core-tokenset") else ["gradlrp"]
        for R in g.rates:
            for c in cs:
                for t in tk:
                    policies.append(ct.BufferPolicy(kind, R, coreset_method=c, token_method=t))
    seen, cells = set(), []
    for seed in g.seeds:
        for p in policies:
            if (p, seed) not in seen:
                seen.add((p, seed))
                cells.append(Cell(p, seed))
    return cells


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results (the grid and output sections excluded)."""
    doc = {s: dataclasses.asdict(getattr(cfg, s)) for s in ("dataset", "split", "model", "train")}
    if cfg.model.checkpoint:
        doc["checkpoint_sha256"] = _file_hash(cfg.model.checkpoint)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def cell_hash(cfg: ExperimentConfig, cell: Cell) -> str:
    doc = {"config": config_hash(cfg), "policy": dataclasses.asdict(cell.policy), "seed": cell.seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _file_hash(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from exc


# one run -------------------------------------------------------------------

@dataclass
class ResultRow:
    method: str
    R: float
    seed: int
    avg_acc: float
    forgetting: float
    stored_token_count: int
    wall_time: float
    config_hash: str = ""
    cell_hash: str = ""

    FIELDS: ClassVar[tuple] = ("method", "R", "seed", "avg_acc", "forgetting", "stored_token_count", "wall_time",
              "config_hash", "cell_hash")


@dataclass
class RunRecord:
    """Everything a finished cell leaves behind."""

    row: ResultRow
    acc: np.ndarray
    stored: list[int]
    # per stored buffer: (stored tokens, budget limit, tokens per entry, entries, pool size)
    buffers: list[tuple[int, int, int, int, int]]

    def metrics(self) -> ct.Metrics:
        return ct.Metrics(self.acc, self.row.method, self.row.R, self.row.seed, self.stored)

    def to_json(self) -> str:
        doc = {"row": dataclasses.asdict(self.row), "acc": self.acc.tolist(), "stored": self.stored,
               "buffers": self.buffers}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        try:
            doc = json.loads(text)
            return cls(ResultRow(**doc["row"]), np.array(doc["acc"], dtype=np.float64),
                       list(doc["stored"]), [tuple(b) for b in doc["buffers"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"unreadable run record: {exc}") from exc


def load_datasets(spec: DatasetSpec, seed: int) -> tuple[dt.Dataset, dt.Dataset]:
    if spec.source == "synthetic":
        base = seed if spec.data_seed is None else spec.data_seed
        train = dt.gen_synthetic(spec.classes, spec.train_per_class, base, noise=spec.noise)
        test = dt.gen_synthetic(spec.classes, spec.test_per_class, base + 10_000, noise=spec.noise)
        return train, test
    if spec.source == "idx":
        return (dt.load_idx(spec.train_images, spec.train_labels),
                dt.load_idx(spec.test_images, spec.test_labels))
    return dt.load_cache(spec.train_cache), dt.load_cache(spec.test_cache)


def build_model(spec: ModelSpec, classes: int, seed: int) -> ViT:
    model = ViT(ModelConfig(spec.embed_dim, spec.heads, spec.blocks, classes, spec.mlp_ratio, seed),
                PatchConfig(spec.image_side, spec.patch_side))
    if spec.checkpoint:
        model.load(spec.checkpoint)
    return model


def train_config(spec: TrainSpec, seed: int) -> ct.TrainConfig:
    return ct.TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr, drop_rate=spec.drop_rate,
                          replay_ratio=spec.replay_ratio, seed=seed, weighted_replay=spec.weighted_replay,
                          optimizer=spec.optimizer, momentum=spec.momentum)


def make_stream(cfg: ExperimentConfig, seed: int) -> ct.TaskStream:
    train, test = load_datasets(cfg.dataset, seed)
    pc = PatchConfig(cfg.model.image_side, cfg.model.patch_side)
    order = cfg.split.order or None
    return ct.split_classes(train.patches(pc), train.labels, test.patches(pc), test.labels,
                            cfg.split.classes_per_task, order)


def run_cell(cfg: ExperimentConfig, cell: Cell, stream: ct.TaskStream | None = None,
             buffer_dir=None, model_path=None) -> RunRecord:
    """Train one policy over the task sequence and check its budget accounting.

    ``buffer_dir`` receives every stored buffer as ``task<i>.cts`` and
    ``model_path`` the final checkpoint.
    """
    start = time.perf_counter()
    stream = stream if stream is not None else make_stream(cfg, cell.seed)
    classes = int(max(max(stream.classes(i)) for i in range(len(stream)))) + 1
    model = build_model(cfg.model, max(classes, cfg.dataset.classes), cell.seed)
    final = {}

    def keep_memory(i, _model, memory):
        final["memory"] = memory

    metrics = ct.run_sequence(stream, model, train_config(cfg.train, cell.seed), cell.policy, keep_memory)
    buffers = []
    for i, b in enumerate(final["memory"].buffers):
        b.validate()
        if buffer_dir is not None:
            Path(buffer_dir).mkdir(parents=True, exist_ok=True)
            tks.serialize(b, Path(buffer_dir) / f"task{i + 1}.cts")
        buffers.append((b.stored_token_count, b.budget_limit(), b.tokens_per_entry, len(b), b.pool_size))
    if model_path is not None:
        model.save(model_path)
    row = ResultRow(metrics.method, float(cell.policy.R), cell.seed, metrics.average(),
                    metrics.average_forgetting(), int(metrics.stored_tokens[-1]),
                    time.perf_counter() - start, config_hash(cfg), cell_hash(cfg, cell))
    return RunRecord(row, metrics.acc, list(metrics.stored_tokens), buffers)


# grids ---------------------------------------------------------------------

@dataclass
class GridResult:
    records: list[RunRecord]
    failures: dict[str, str]
    skipped: int = 0

    @property
    def rows(self) -> list[ResultRow]:
        return [r.row for r in self.records]


def _cell_job(args):
    cfg, cell = args
    try:
        return cell, run_cell(cfg, cell), None
    except Exception:  # recorded per cell so the grid can continue
        return cell, None, traceback.format_exc()


def run_experiment(cfg: ExperimentConfig, resume: bool = True, log=None) -> GridResult:
    """Run every grid cell, writing one JSON record per cell plus the CSV and SVG reports.

    With ``resume`` a cell whose record already exists is loaded instead of
    re-run.  A failing cell leaves an ``.error`` file and the grid goes on.
    """
    out = Path(cfg.output.out)
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    cells = expand_grid(cfg)
    done: dict[Cell, RunRecord] = {}
    todo = []
    skipped = 0
    for cell in cells:
        path = runs / f"{cell_hash(cfg, cell)}.json"
        if resume and path.exists():
            done[cell] = RunRecord.from_json(path.read_text())
            skipped += 1
        else:
            todo.append(cell)
    failures: dict[str, str] = {}

    def finish(cell, record, error):
        h = cell_hash(cfg, cell)
        if error is None:
            (runs / f"{h}.json").write_text(record.to_json())
            err = runs / f"{h}.error"
            if err.exists():
                err.unlink()
            done[cell] = record
        else:
            (runs / f"{h}.error").write_text(f"{cell.label}\n{error}")
            failures[cell.label] = error
        if log is not None:
            status = "failed" if error else f"avg_acc={record.row.avg_acc:.3f}"
            log(f"{cell.label}: {status}")

    jobs = [(cfg, c) for c in todo]
    if cfg.output.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.output.workers) as pool:
            for cell, record, error in pool.map(_cell_job, jobs):
                finish(cell, record, error)
    else:
        for job in jobs:
            finish(*_cell_job(job))
    records = [done[c] for c in cells if c in done]
    write_reports(out, records, plots=cfg.output.plots)
    return GridResult(records, failures, skipped)


def write_reports(out, records: list[RunRecord], plots: bool = True) -> None:
    out = Path(out)
    write_metrics_csv(out / "metrics.csv", records)
    write_rows_csv(out / "summary.csv", [r.row for r in records])
    if plots and records:
        from . import plots as pl
        hashes = sorted({r.row.config_hash for r in records})
        pl.emit_plots(records, out, desc="config " + " ".join(hashes))


def write_metrics_csv(path, records: list[RunRecord]) -> None:
    """Accuracy matrix entries of every run, tagged with the config and cell hashes."""
    fields = ["after_task", "eval_task", "accuracy", "method", "R", "seed", "config_hash", "cell_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in records:
            for row in r.metrics().rows():
                w.writerow({**row, "config_hash": r.row.config_hash, "cell_hash": r.row.cell_hash})


def write_rows_csv(path, rows: list[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ResultRow.FIELDS)
        for r in rows:
            w.writerow([r.method, repr(r.R), r.seed, repr(r.avg_acc), repr(r.forgetting),
                        r.stored_token_count, f"{r.wall_time:.3f}", r.config_hash, r.cell_hash])


def check_budget(record: RunRecord) -> list[str]:
    """Accounting violations of one run; empty when every buffer is within bounds."""
    problems = []
    for i, (stored, limit, k, entries, pool) in enumerate(record.buffers):
        if stored > limit:
            problems.append(f"buffer {i}: {stored} tokens exceed the limit {limit}")
        if stored != k * entries:
            problems.append(f"buffer {i}: {stored} tokens but {entries} entries of {k}")
    total = sum(b[0] for b in record.buffers)
    if record.stored and record.stored[-1] != total:
        problems.append(f"final stored count {record.stored[-1]} differs from the buffer total {total}")
    return problems
