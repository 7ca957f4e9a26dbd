"""Sequential class-incremental training with token dropout and replay.

Each optimization step sums the loss of one new-task batch (patches
dropped at random) and one replay batch rebuilt from stored buffers
(zero-padded, never re-masked).  The keep-probability for new data
defaults to the token fraction ``t`` of the run's buffer policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from . import tokenset as tks
from .errors import ContractError, StateError
from .tensor import Tape, Tensor
from .vit import TokenSequence, ViT

POLICIES = ("naive", "cumulative") + tks.FAMILIES


@dataclass
class Task:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: tuple[int, ...]


class TaskStream:
    """Ordered tasks with pairwise disjoint class sets.

    Every read of a task's data is appended to ``access_log`` as
    ``(split, task_index)`` so tests can check that no future task is touched.
    """

    def __init__(self, tasks: list[Task]):
        if not tasks:
            raise ContractError("a task stream needs at least one task")
        seen: set[int] = set()
        for i, task in enumerate(tasks):
            overlap = seen & set(task.classes)
            if overlap:
                raise ContractError(f"task {i} repeats classes {sorted(overlap)}")
            seen |= set(task.classes)
        self._tasks = tasks
        self.access_log: list[tuple[str, int]] = []

    def __len__(self) -> int:
        return len(self._tasks)

    def classes(self, i: int) -> tuple[int, ...]:
        return self._tasks[i].classes

    def train(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append(("train", i))
        return self._tasks[i].train_x, self._tasks[i].train_y

    def test(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append(("test", i))
        return self._tasks[i].test_x, self._tasks[i].test_y


def split_classes(train_x, train_y, test_x, test_y, classes_per_task: int = 2, order=None) -> TaskStream:
    """Group consecutive classes (in ``order``) into tasks."""
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    order = list(np.unique(train_y)) if order is None else list(order)
    if len(order) % classes_per_task:
        raise ContractError(f"{len(order)} classes do not split into tasks of {classes_per_task}")
    tasks = []
    for i in range(0, len(order), classes_per_task):
        cls = tuple(int(c) for c in order[i:i + classes_per_task])
        tr, te = np.isin(train_y, cls), np.isin(test_y, cls)
        tasks.append(Task(train_x[tr], train_y[tr], test_x[te], test_y[te], cls))
    return TaskStream(tasks)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 3e-4
    # None derives the drop rate from the buffer policy (drop = 1 - t)
    drop_rate: float | None = None
    replay_ratio: float = 1.0
    seed: int = 0
    weighted_replay: bool = False
    optimizer: str = "adam"
    momentum: float = 0.9

    def __post_init__(self):
        if self.drop_rate is not None and not 0 <= self.drop_rate < 1:
            raise ContractError(f"drop rate must lie in [0, 1), got {self.drop_rate}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.steps, 1 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p._set_data(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = [np.zeros(p.shape) for p in params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p._set_data(p.data - self.lr * b)


def make_optimizer(model: ViT, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.parameters(), cfg.lr)
    return SGD(model.parameters(), cfg.lr, cfg.momentum)


# token dropout -------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def dropout_mask(n: int, T: int, r: float, seed) -> np.ndarray:
    """``(n, T)`` keep flags, each true with probability ``1 - r``."""
    if not 0 <= r < 1:
        raise ContractError(f"drop rate must lie in [0, 1), got {r}")
    if r == 0:
        return np.ones((n, T), dtype=bool)
    return _rng(seed).random((n, T)) >= r


def apply_token_dropout(seq: TokenSequence, r: float, seed, model: ViT) -> TokenSequence:
    """Re-embed ``seq`` with each present patch independently dropped at rate ``r``."""
    if seq.patches is None:
        raise StateError("token dropout needs the pre-embedding patches of the sequence")
    if r == 0:
        return seq
    patches = seq.patches if seq.batched else seq.patches[None]
    old = np.atleast_2d(seq.mask)[:, 1:]
    keep = dropout_mask(len(patches), patches.shape[1], r, seed) & old
    out = model.embed(patches, keep)
    if not seq.batched:
        return TokenSequence(out.tokens[0], out.positions, out.mask[0], out.patches[0])
    return out


# training ------------------------------------------------------------------

@dataclass
class ReplayMemory:
    """Stacked padded inputs of every stored buffer."""

    x: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    w: np.ndarray
    buffers: list[tks.TokensetBuffer] = field(default_factory=list)

    @classmethod
    def empty(cls, T: int, D: int) -> "ReplayMemory":
        return cls(np.zeros((0, T, D)), np.zeros((0, T), dtype=bool), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.y)

    def add(self, buffer: tks.TokensetBuffer) -> None:
        x, m, y, w = tks.padded_arrays(buffer)
        self.x = np.concatenate([self.x, x])
        self.mask = np.concatenate([self.mask, m])
        self.y = np.concatenate([self.y, y])
        self.w = np.concatenate([self.w, w])
        self.buffers.append(buffer)

    @property
    def stored_token_count(self) -> int:
        return int(self.mask.sum())


def batch_loss(model: ViT, x, mask, y, weights=None) -> Tensor:
    """Mean cross-entropy of a batch, or its weight-normalized sum."""
    logits, _ = model.forward(model.embed(x, mask))
    if weights is None:
        return tn.cross_entropy(logits, y)
    per = tn.cross_entropy(logits, y, reduction="none")
    w = np.asarray(weights, dtype=np.float64)
    return tn.tsum(per * Tensor._wrap(w / w.sum(), False))


def combined_loss(model: ViT, new, replay=None) -> tuple[Tensor, Tensor, Tensor | None]:
    """``loss(new) + loss(replay)`` from separate forwards; returns the total and both parts.

    ``new`` and ``replay`` are ``(x, mask, y)`` or ``(x, mask, y, weights)`` tuples.
    """
    l_new = batch_loss(model, *new)
    if replay is None or len(replay[2]) == 0:
        return l_new, l_new, None
    l_rep = batch_loss(model, *replay)
    return l_new + l_rep, l_new, l_rep


def train_step(model: ViT, opt, new, replay=None) -> float:
    model.zero_grad()
    with Tape() as tape:
        total, _, _ = combined_loss(model, new, replay)
    tape.backward(total)
    opt.step()
    return total.item()


def train_task(model: ViT, x: np.ndarray, y: np.ndarray, memory: ReplayMemory | None, cfg: TrainConfig,
               rng: np.random.Generator, keep: float = 1.0, opt=None) -> list[float]:
    """Train on one task's data interleaved with replay; returns per-step losses.

    ``keep`` is the new-data keep-probability; ``cfg.drop_rate`` overrides it.
    """
    r = cfg.drop_rate if cfg.drop_rate is not None else 1.0 - keep
    if not 0 <= r < 1:
        raise ContractError(f"drop rate must lie in [0, 1), got {r}")
    opt = opt if opt is not None else make_optimizer(model, cfg)
    M = 0 if memory is None else len(memory)
    rb = min(max(1, int(round(cfg.replay_ratio * cfg.batch_size))), M) if cfg.replay_ratio > 0 else 0
    losses = []
    N, T = x.shape[:2]
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for i in range(0, N, cfg.batch_size):
            rows = order[i:i + cfg.batch_size]
            mask = dropout_mask(len(rows), T, r, rng)
            replay = None
            if rb:
                pick = rng.choice(M, size=rb, replace=False)
                w = memory.w[pick] if cfg.weighted_replay else None
                replay = (memory.x[pick], memory.mask[pick], memory.y[pick], w)
            losses.append(train_step(model, opt, (x[rows], mask, y[rows]), replay))
    return losses


def evaluate(model: ViT, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy on full, unmasked inputs."""
    if len(y) == 0:
        return float("nan")
    pred = model.detached().predict(x, batch_size=batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


# metrics -------------------------------------------------------------------

@dataclass
class Metrics:
    acc: np.ndarray
    method: str = ""
    R: float = 1.0
    seed: int = 0
    stored_tokens: list[int] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return self.acc.shape[0]

    def average(self, i: int | None = None) -> float:
        """Mean accuracy over the tasks seen after training task ``i`` (default: last)."""
        i = self.num_tasks - 1 if i is None else i
        return float(np.mean(self.acc[i, :i + 1]))

    def forgetting(self) -> np.ndarray:
        """``max_{i <= k} acc[i, j] - acc[k, j]`` per task ``j`` after the last task ``k``."""
        k = self.num_tasks - 1
        return np.array([np.max(self.acc[j:, j]) - self.acc[k, j] for j in range(k + 1)])

    def average_forgetting(self) -> float:
        f = self.forgetting()[:-1]
        return float(f.mean()) if len(f) else 0.0

    def rows(self):
        for i in range(self.num_tasks):
            for j in range(i + 1):
                yield {"after_task": i + 1, "eval_task": j + 1, "accuracy": repr(float(self.acc[i, j])),
                       "method": self.method, "R": repr(float(self.R)), "seed": self.seed}


def write_metrics_csv(path, runs: list[Metrics]) -> None:
    fields = ["after_task", "eval_task", "accuracy", "method", "R", "seed"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for m in runs:
            w.writerows(m.rows())


def write_summary_csv(path, runs: list[Metrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "R", "avg_acc", "avg_forgetting"])
        for m in runs:
            w.writerow([m.method, repr(float(m.R)), repr(m.average()), repr(m.average_forgetting())])


# policies ------------------------------------------------------------------

@dataclass(frozen=True)
class BufferPolicy:
    """What to keep from each finished task.

    ``naive`` keeps nothing, ``cumulative`` keeps all raw data, the other
    kinds build a buffer of the named family at rate ``R``.
    """

    kind: str = "naive"
    R: float = 1.0
    coreset_method: str = "gradmatch"
    token_method: str = "gradlrp"
    lam: float = 0.5
    f: float = 0.9
    eta: float = 0.7

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ContractError(f"unknown buffer policy {self.kind!r}; expected one of {POLICIES}")
        if not 0 < self.R <= 1:
            raise ContractError(f"retention rate must lie in (0, 1], got {self.R}")

    @property
    def name(self) -> str:
        if self.kind in ("naive", "cumulative", "random-coreset"):
            return self.kind
        if self.kind == "coreset":
            return f"coreset:{self.coreset_method}"
        if self.kind == "core-tokens":
            return f"core-tokens:{self.token_method}"
        return f"core-tokenset:{self.coreset_method}+{self.token_method}"

    def token_fraction(self) -> float:
        """The buffer's token fraction ``t``; the new-data keep-probability."""
        if self.kind == "core-tokens":
            return self.R
        if self.kind == "core-tokenset":
            return tks.split_budget(self.R).t
        return 1.0

    def build(self, x, y, model, sample_ids, seed) -> tks.TokensetBuffer | None:
        if self.kind == "naive":
            return None
        if self.kind == "cumulative":
            return tks.build_core_tokenset(x, y, None, 1.0, "all", "all", sample_ids=sample_ids, seed=seed)
        return tks.build_family(self.kind, x, y, model, self.R, coreset_method=self.coreset_method,
                                token_method=self.token_method, sample_ids=sample_ids, seed=seed,
                                lam=self.lam, f=self.f, eta=self.eta)


def run_sequence(stream: TaskStream, model: ViT, cfg: TrainConfig, policy: BufferPolicy,
                 callback=None) -> Metrics:
    """Train on every task in order, storing a buffer after each and evaluating seen tasks.

    ``callback(i, model, memory)`` runs after task ``i`` is evaluated.
    """
    k = len(stream)
    acc = np.full((k, k), np.nan)
    rng = np.random.default_rng(cfg.seed)
    T, D = model.patch.num_patches, model.patch.patch_dim
    memory = ReplayMemory.empty(T, D)
    keep = policy.token_fraction()
    stored = []
    offset = 0
    for i in range(k):
        x, y = stream.train(i)
        train_task(model, x, y, memory, cfg, rng, keep)
        for j in range(i + 1):
            acc[i, j] = evaluate(model, *stream.test(j))
        if i < k - 1:
            buf = policy.build(x, y, model, np.arange(offset, offset + len(y)), cfg.seed * 1000 + i)
            if buf is not None:
                memory.add(buf)
        offset += len(y)
        stored.append(memory.stored_token_count)
        if callback is not None:
            callback(i, model, memory)
    return Metrics(acc, policy.name, policy.R, cfg.seed, stored)

