"""Token-level replay buffers: coreset of samples, then core tokens of each sample.

A buffer stores raw patch payloads (not embeddings) at 1-based positions,
so it stays valid while the model keeps training.  Three families share
one budget: pure coresets (``t = 1``), pure core tokens (``s = 1``) and
core tokensets (``s * t = R``).
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attribution as attr
from . import coreset as cs
from .errors import ContractError, FormatError
from .vit import TokenSequence, ViT

MAGIC = b"CTS1"
VERSION = 1
TOKEN_METHODS = ("all",) + attr.STRATEGIES
CORESET_METHODS = ("all",) + cs.METHODS


@dataclass(frozen=True)
class BudgetSplit:
    R: float
    s: float
    t: float

    def __post_init__(self):
        if not (0 < self.s <= 1 and 0 < self.t <= 1):
            raise ContractError(f"sample and token fractions must lie in (0, 1], got s={self.s}, t={self.t}")
        if abs(self.s * self.t - self.R) > 1e-12:
            raise ContractError(f"s * t = {self.s * self.t} does not match R = {self.R}")


def split_budget(R: float, mode: str = "balanced", s: float | None = None) -> BudgetSplit:
    """Divide a token budget ``R`` into a sample fraction ``s`` and a token fraction ``t``.

    ``balanced`` uses ``s = t = sqrt(R)``; ``explicit`` takes ``s`` and sets
    ``t = R / s``.  The aliases ``coreset`` (``s = R``) and ``tokens``
    (``s = 1``) name the two single-stage extremes.
    """
    if not 0 < R <= 1:
        raise ContractError(f"retention rate must lie in (0, 1], got {R}")
    if mode == "balanced":
        root = math.sqrt(R)
        return BudgetSplit(R, root, R / root)
    if mode == "coreset":
        return BudgetSplit(R, R, 1.0)
    if mode == "tokens":
        return BudgetSplit(R, 1.0, R)
    if mode == "explicit":
        if s is None or not 0 < s <= 1:
            raise ContractError(f"explicit split needs a sample fraction in (0, 1], got {s}")
        if R / s > 1 + 1e-12:
            raise ContractError(f"R / s = {R / s} exceeds 1; raise s to at least R")
        return BudgetSplit(R, s, min(1.0, R / s))
    raise ContractError(f"unknown split mode {mode!r}")


@dataclass
class TokensetEntry:
    sample_id: int
    label: int
    positions: np.ndarray
    values: np.ndarray
    # coreset weight; kept in memory only, the file format has no slot for it
    weight: float = 1.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.uint32).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.positions), -1)


@dataclass
class TokensetBuffer:
    entries: list[TokensetEntry]
    num_patches: int
    patch_dim: int
    R: float
    s: float
    t: float
    coreset_method: str = "all"
    token_method: str = "all"
    seed: int = 0
    # size of the pool the buffer summarizes, and selector options
    pool_size: int = 0
    options: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tokens_per_entry(self) -> int:
        return len(self.entries[0].positions) if self.entries else 0

    @property
    def stored_token_count(self) -> int:
        return sum(len(e.positions) for e in self.entries)

    def budget_limit(self) -> int:
        """Upper bound ``ceil(R * N * T) + entries`` on the stored token count."""
        return budget_cap(self.R, self.pool_size, self.num_patches) + len(self.entries)

    def validate(self) -> None:
        T = self.num_patches
        k = self.tokens_per_entry
        for e in self.entries:
            p = e.positions.astype(np.int64)
            if len(p) != k:
                raise FormatError(f"entry {e.sample_id} stores {len(p)} tokens, expected {k}")
            if len(p) and (p.min() < 1 or p.max() > T):
                raise FormatError(f"entry {e.sample_id} has positions outside [1, {T}]")
            if np.any(np.diff(p) <= 0):
                raise FormatError(f"entry {e.sample_id} positions are not sorted and distinct")
            if e.values.shape != (len(p), self.patch_dim):
                raise FormatError(f"entry {e.sample_id} payload has shape {e.values.shape}")


def budget_cap(R: float, N: int, T: int) -> int:
    return attr.retained_count(R, N * T)


def entry_counts(split: BudgetSplit, N: int, T: int) -> tuple[int, int]:
    """Samples kept and tokens per sample, both rounded up then trimmed to the budget.

    The sample count shrinks while ``n * k`` exceeds ``ceil(R * N * T) + n``.
    """
    k = attr.retained_count(split.t, T)
    n = attr.retained_count(split.s, N)
    cap = budget_cap(split.R, N, T)
    while n > 0 and n * k > cap + n:
        n -= 1
    return n, k


# building ----------------------------------------------------------------

def build_core_tokenset(patches: np.ndarray, labels, model: ViT | None, R: float, coreset_method: str,
                        token_method: str, mode: str = "balanced", *, s: float | None = None,
                        sample_ids=None, seed: int = 0, lam: float = 0.5, f: float = 0.9,
                        eta: float = 0.7, balanced: bool = True, batch_size: int = 128) -> TokensetBuffer:
    """Summarize ``(N, T, D)`` patches at token budget ``R``.

    Samples are chosen by ``coreset_method`` (skipped when ``s = 1``) and
    their tokens by ``token_method`` (skipped when ``t = 1``).  ``model`` is
    only needed by gradient and attribution based methods.
    """
    patches = np.asarray(patches, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N, T, D = patches.shape
    if len(labels) != N:
        raise ContractError(f"{N} samples but {len(labels)} labels")
    if coreset_method not in CORESET_METHODS:
        raise ContractError(f"unknown coreset method {coreset_method!r}; expected one of {CORESET_METHODS}")
    if token_method not in TOKEN_METHODS:
        raise ContractError(f"unknown token method {token_method!r}; expected one of {TOKEN_METHODS}")
    ids = np.arange(N) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    split = split_budget(R, mode, s)
    n, k = entry_counts(split, N, T)

    rows, weights = _pick_samples(patches, labels, model, n, coreset_method, seed, lam, balanced, N)
    positions = _pick_tokens(patches[rows], labels[rows], ids[rows], model, k, token_method,
                             seed, f, eta, batch_size)
    entries = []
    for row, w, pos in zip(rows, weights, positions):
        vals = patches[row][pos.astype(np.int64) - 1]
        entries.append(TokensetEntry(int(ids[row]), int(labels[row]), pos, vals, float(w)))
    options = {"lam": repr(lam), "f": repr(f), "eta": repr(eta), "balanced": str(int(balanced))}
    return TokensetBuffer(entries, T, D, split.R, split.s, split.t,
                          "all" if n == N else coreset_method,
                          "all" if k == T else token_method, seed, N, options)


def _pick_samples(patches, labels, model, n, method, seed, lam, balanced, N):
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if n == N or method == "all":
        if n != N:
            raise ContractError("coreset method 'all' requires s = 1")
        return np.arange(N), np.ones(N)
    feats = None
    if method != "random":
        _require_model(model, method)
        feats = cs.per_sample_gradients(model, patches, labels)
    sel = cs.select(method, feats, labels, n, balanced=balanced, lam=lam, seed=seed)
    return sel.indices, sel.weights


def _pick_tokens(patches, labels, ids, model, k, method, seed, f, eta, batch_size):
    n, T = patches.shape[:2]
    if k == T or method == "all":
        if k != T:
            raise ContractError("token method 'all' requires t = 1")
        return np.tile(np.arange(1, T + 1, dtype=np.uint32), (n, 1))
    if n == 0:
        return np.zeros((0, k), dtype=np.uint32)
    R_tok = k / T
    if method == "random":
        # one stream per sample id, so each entry can be re-derived on its own
        return np.stack([attr.select_random(1, T, R_tok, np.random.default_rng([seed, int(i)])).positions[0]
                         for i in ids]).astype(np.uint32)
    _require_model(model, method)
    scores = attr.score_tokens(method, model, patches, labels, f=f, eta=eta, batch_size=batch_size)
    return attr.select_top_k(scores, R_tok).positions.astype(np.uint32)


def _require_model(model, method):
    if model is None:
        raise ContractError(f"method {method!r} needs a trained model")


def build_family(family: str, patches, labels, model, R, **kwargs) -> TokensetBuffer:
    """Buffers compared at equal memory.

    ``random-coreset`` and ``coreset`` keep whole samples, ``core-tokens``
    keeps every sample with ``R`` of its tokens, ``core-tokenset`` splits
    the budget evenly between the two stages.
    """
    coreset_method = kwargs.pop("coreset_method", "gradmatch")
    token_method = kwargs.pop("token_method", "gradlrp")
    if family == "random-coreset":
        return build_core_tokenset(patches, labels, model, R, "random", "all", "coreset", **kwargs)
    if family == "coreset":
        return build_core_tokenset(patches, labels, model, R, coreset_method, "all", "coreset", **kwargs)
    if family == "core-tokens":
        return build_core_tokenset(patches, labels, model, R, "all", token_method, "tokens", **kwargs)
    if family == "core-tokenset":
        return build_core_tokenset(patches, labels, model, R, coreset_method, token_method, "balanced", **kwargs)
    raise ContractError(f"unknown buffer family {family!r}")


FAMILIES = ("random-coreset", "coreset", "core-tokens", "core-tokenset")


def budget_bounds(R: float, N: int, T: int, k: int, entries: int) -> tuple[int, int]:
    """Stored-token range every family must land in: ``[ceil(RNT) - k, ceil(RNT) + entries]``."""
    cap = budget_cap(R, N, T)
    return cap - k, cap + entries


# replay inputs -----------------------------------------------------------

def pad_entry(entry: TokensetEntry, num_patches: int, patch_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded ``(T, D)`` patches and the ``(T,)`` presence mask of one entry."""
    pos = entry.positions.astype(np.int64)
    if len(pos) and (pos.min() < 1 or pos.max() > num_patches):
        raise FormatError(f"entry {entry.sample_id}: positions must lie in [1, {num_patches}]")
    if len(np.unique(pos)) != len(pos):
        raise FormatError(f"entry {entry.sample_id}: repeated positions")
    if entry.values.shape != (len(pos), patch_dim):
        raise FormatError(f"entry {entry.sample_id}: payload shape {entry.values.shape} "
                          f"does not match {len(pos)} tokens of dim {patch_dim}")
    out = np.zeros((num_patches, patch_dim))
    mask = np.zeros(num_patches, dtype=bool)
    out[pos - 1] = entry.values
    mask[pos - 1] = True
    return out, mask


def reconstruct_padded(entry: TokensetEntry, model: ViT) -> TokenSequence:
    """Embed a stored entry as a full-length input with absent patches zeroed."""
    patches, mask = pad_entry(entry, model.patch.num_patches, model.patch.patch_dim)
    return model.embed(patches, mask)


def padded_arrays(buffer: TokensetBuffer) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stacked padded patches, masks, labels and weights of all entries."""
    n, T, D = len(buffer), buffer.num_patches, buffer.patch_dim
    X = np.zeros((n, T, D))
    M = np.zeros((n, T), dtype=bool)
    for i, e in enumerate(buffer.entries):
        X[i], M[i] = pad_entry(e, T, D)
    y = np.array([e.label for e in buffer.entries], dtype=np.int64)
    w = np.array([e.weight for e in buffer.entries], dtype=np.float64)
    return X, M, y, w


# persistence -------------------------------------------------------------

def _meta_tag(buffer: TokensetBuffer) -> str:
    items = {"seed": str(buffer.seed), "pool": str(buffer.pool_size), **buffer.options}
    return ";".join(f"{k}={v}" for k, v in sorted(items.items()))


def serialize(buffer: TokensetBuffer, path) -> None:
    """Write the buffer in the ``CTS1`` little-endian format with a trailing CRC32."""
    buffer.validate()
    parts = [struct.pack("<III", len(buffer), buffer.num_patches, buffer.patch_dim),
             struct.pack("<ddd", buffer.R, buffer.s, buffer.t)]
    for tag in (buffer.coreset_method, buffer.token_method, _meta_tag(buffer)):
        raw = tag.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    for e in buffer.entries:
        k = len(e.positions)
        parts.append(struct.pack("<QII", e.sample_id, e.label, k))
        parts.append(e.positions.astype("<u4").tobytes())
        parts.append(e.values.astype("<f8").tobytes())
    body = b"".join(parts)
    head = MAGIC + struct.pack("<H", VERSION)
    with open(path, "wb") as fh:
        fh.write(head + body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data, self.pos = data, offset

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.pos + nbytes
        if end > len(self.data):
            raise FormatError(f"truncated buffer while reading {what}: need {nbytes} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(path) -> TokensetBuffer:
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data, 0)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'CTS1'", 0)
    (version,) = rd.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported buffer version {version}", 4)
    body_start = rd.pos
    count, T, D = rd.unpack("<III", "header")
    R, s, t = rd.unpack("<ddd", "budget split")
    tags = []
    for what in ("coreset method", "token method", "metadata"):
        (size,) = rd.unpack("<I", what + " length")
        at = rd.pos
        try:
            tags.append(rd.take(size, what).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} tag is not valid UTF-8", at) from exc
    raw_entries = []
    for i in range(count):
        sid, label, k = rd.unpack("<QII", f"entry {i} header")
        pos = np.frombuffer(rd.take(4 * k, f"entry {i} positions"), dtype="<u4")
        vals = np.frombuffer(rd.take(8 * k * D, f"entry {i} payload"), dtype="<f8")
        raw_entries.append((sid, label, pos, vals.reshape(k, D)))
    body_end = rd.pos
    (crc,) = rd.unpack("<I", "checksum")
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} unexpected bytes after the checksum", rd.pos)
    if zlib.crc32(data[body_start:body_end]) != crc:
        raise FormatError("checksum mismatch: buffer body is corrupted", body_end)
    meta = dict(item.split("=", 1) for item in tags[2].split(";") if item)
    seed, pool = int(meta.pop("seed", 0)), int(meta.pop("pool", 0))
    entries = [TokensetEntry(int(sid), int(label), pos.copy(), vals.copy())
               for sid, label, pos, vals in raw_entries]
    buf = TokensetBuffer(entries, T, D, R, s, t, tags[0], tags[1], seed, pool, meta)
    buf.validate()
    return buf


def export_buffer_csv(path, buffer: TokensetBuffer) -> None:
    """One row per stored token; the payload is written space separated."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "position", "payload"])
        for e in buffer.entries:
            for p, v in zip(e.positions, e.values):
                w.writerow([e.sample_id, e.label, int(p), " ".join(repr(float(x)) for x in v)])


# self-consistency --------------------------------------------------------

def recompute_positions(buffer: TokensetBuffer, patches: np.ndarray, model: ViT | None,
                        picks=None) -> list[int]:
    """Ids of entries whose positions differ from a fresh attribution run.

    ``patches`` maps a sample id to its full ``(T, D)`` input (an array
    indexed by id works).  ``picks`` restricts the check to some entries.
    """
    entries = buffer.entries if picks is None else [buffer.entries[i] for i in picks]
    if not entries:
        return []
    ids = np.array([e.sample_id for e in entries])
    labels = np.array([e.label for e in entries])
    X = np.stack([np.asarray(patches[int(i)], dtype=np.float64) for i in ids])
    k = buffer.tokens_per_entry
    opts = buffer.options
    fresh = _pick_tokens(X, labels, ids, model, k, buffer.token_method, buffer.seed,
                         float(opts.get("f", 0.9)), float(opts.get("eta", 0.7)), 128)
    return [int(e.sample_id) for e, p in zip(entries, fresh) if not np.array_equal(e.positions, p)]
