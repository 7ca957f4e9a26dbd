"""Micro vision transformer operating on zero-padded partial inputs.

Images are cut into ``T`` raster-ordered patches, projected by a learned
matrix ``E`` together with a learned class patch, offset by positional
embeddings and passed through ``B`` pre-norm attention blocks.  The
classifier reads the final class-token embedding.

Dropped patch tokens are zeroed in pixel space before the projection, so
they still carry their positional embedding and the sequence length never
changes with the mask.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError, FormatError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TOKV1"


@dataclass(frozen=True)
class PatchConfig:
    image_side: int = 28
    patch_side: int = 7
    channels: int = 1

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ContractError(
                f"image side {self.image_side} is not divisible by patch side {self.patch_side}"
            )

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2 * self.channels


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    classes: int = 10
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ContractError("a model needs at least one block")


@dataclass
class TokenSequence:
    """Embedded tokens of one sample ``(T+1, d)`` or a batch ``(n, T+1, d)``.

    ``mask`` marks present tokens; column 0 is the class token and is
    always present.  ``patches`` keeps the pre-embedding payload the tokens
    were built from (already zeroed where the mask is false).
    """

    tokens: Tensor
    positions: np.ndarray
    mask: np.ndarray
    patches: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        steps = np.diff(self.positions)
        if self.positions[0] != 0 or np.any(steps <= 0):
            raise ContractError("token positions must start at 0 and be strictly increasing")
        if not np.all(self.mask[..., 0]):
            raise ContractError("the class token must always be present")
        if self.tokens.shape[-2] != self.positions.size or self.mask.shape[-1] != self.positions.size:
            raise DimensionError(
                f"tokens {self.tokens.shape}, mask {self.mask.shape} and "
                f"{self.positions.size} positions disagree"
            )

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3

    def __len__(self) -> int:
        return self.tokens.shape[0] if self.batched else 1


@dataclass
class AttentionRecord:
    """Pre-softmax scores and attention maps of every block.

    Each entry has shape ``(n, h, T+1, T+1)``.  After a backward pass on a
    tape that recorded the forward, ``maps[b].grad`` holds the attention
    gradients.
    """

    scores: list[Tensor] = field(default_factory=list)
    maps: list[Tensor] = field(default_factory=list)

    @property
    def num_blocks(self) -> int:
        return len(self.maps)


def patchify(images: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Cut ``(S, S, F)`` or ``(n, S, S, F)`` images into raster-ordered flat patches."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    s, p, f = cfg.image_side, cfg.patch_side, cfg.channels
    if batch.ndim != 4 or batch.shape[1:] != (s, s, f):
        raise DimensionError(f"patchify: expected images of shape ({s}, {s}, {f}), got {images.shape}")
    g = cfg.grid
    out = batch.reshape(-1, g, p, g, p, f).transpose(0, 1, 3, 2, 4, 5).reshape(-1, g * g, p * p * f)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    batch = patches[None] if single else patches
    g, p, f = cfg.grid, cfg.patch_side, cfg.channels
    if batch.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise DimensionError(
            f"unpatchify: expected patches of shape ({cfg.num_patches}, {cfg.patch_dim}), got {patches.shape}"
        )
    out = batch.reshape(-1, g, g, p, p, f).transpose(0, 1, 3, 2, 4, 5).reshape(-1, g * p, g * p, f)
    return out[0] if single else out


class ViT:
    """Parameters and forward pass of the micro vision transformer."""

    def __init__(self, cfg: ModelConfig, patch: PatchConfig = PatchConfig()):
        self.cfg = cfg
        self.patch = patch
        self.forward_calls = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        d, pd, t = cfg.embed_dim, patch.patch_dim, patch.num_patches
        hidden = d * cfg.mlp_ratio

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        self._add("embed.E", normal(pd, d))
        self._add("embed.cls", normal(pd))
        self._add("embed.pos", normal(t + 1, d))
        for b in range(cfg.blocks):
            pre = f"block{b}."
            self._add(pre + "ln1.g", np.ones(d))
            self._add(pre + "ln1.b", np.zeros(d))
            for w in ("q", "k", "v", "o"):
                self._add(pre + f"attn.W{w}", normal(d, d))
                self._add(pre + f"attn.b{w}", np.zeros(d))
            self._add(pre + "ln2.g", np.ones(d))
            self._add(pre + "ln2.b", np.zeros(d))
            self._add(pre + "mlp.W1", normal(d, hidden))
            self._add(pre + "mlp.b1", np.zeros(hidden))
            self._add(pre + "mlp.W2", normal(hidden, d))
            self._add(pre + "mlp.b2", np.zeros(d))
        self._add("norm.g", np.ones(d))
        self._add("norm.b", np.zeros(d))
        self._add("head.W", normal(d, cfg.classes))
        self._add("head.b", np.zeros(cfg.classes))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_param(self, name: str, value: np.ndarray) -> None:
        old = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise DimensionError(f"parameter {name}: expected shape {old.shape}, got {value.shape}")
        self.params[name] = Tensor(value, requires_grad=old.requires_grad, name=name)

    def detached(self) -> "ViT":
        """A view sharing parameter data but never producing parameter gradients."""
        clone = ViT.__new__(ViT)
        clone.cfg, clone.patch, clone.forward_calls = self.cfg, self.patch, 0
        clone.params = {k: Tensor._wrap(v.data, False) for k, v in self.params.items()}
        clone._parent = self
        return clone

    def _count_forward(self):
        self.forward_calls += 1
        parent = getattr(self, "_parent", None)
        if parent is not None:
            parent.forward_calls += 1

    # embedding ----------------------------------------------------------

    def embed(self, patches: np.ndarray, mask: np.ndarray | None = None) -> TokenSequence:
        """Embed ``(T, D)`` or ``(n, T, D)`` patches; false mask entries are zeroed first."""
        patches = np.asarray(patches, dtype=np.float64)
        single = patches.ndim == 2
        x = patches[None] if single else patches
        t, pd = self.patch.num_patches, self.patch.patch_dim
        if x.ndim != 3 or x.shape[1:] != (t, pd):
            raise DimensionError(f"embed: expected patches of shape (n, {t}, {pd}), got {patches.shape}")
        n = x.shape[0]
        if mask is None:
            keep = np.ones((n, t), dtype=bool)
        else:
            keep = np.asarray(mask, dtype=bool).reshape(n, t)
        x = np.where(keep[..., None], x, 0.0)
        cls = tn.broadcast_to(tn.reshape(self["embed.cls"], (1, 1, pd)), (n, 1, pd))
        full = tn.concat([cls, Tensor._wrap(x, False)], axis=1)
        z0 = tn.matmul(full, self["embed.E"]) + self["embed.pos"]
        full_mask = np.concatenate([np.ones((n, 1), dtype=bool), keep], axis=1)
        if single:
            z0 = z0[0]
            full_mask = full_mask[0]
            x = x[0]
        return TokenSequence(z0, np.arange(t + 1), full_mask, x)

    # blocks -------------------------------------------------------------

    def _attention(self, z: Tensor, b: int, score_scale, record: AttentionRecord | None) -> Tensor:
        cfg = self.cfg
        n, L, d = z.shape
        h, dh = cfg.heads, d // cfg.heads
        pre = f"block{b}.attn."

        def heads(name):
            y = tn.matmul(z, self[pre + "W" + name]) + self[pre + "b" + name]
            return tn.transpose(tn.reshape(y, (n, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if score_scale is not None:
            scores = scores * np.asarray(score_scale, dtype=np.float64).reshape(n, 1, 1, L)
        attn = tn.softmax(scores, axis=-1)
        if record is not None:
            record.scores.append(scores)
            record.maps.append(attn)
        out = tn.reshape(tn.transpose(tn.matmul(attn, v), (0, 2, 1, 3)), (n, L, d))
        return tn.matmul(out, self[pre + "Wo"]) + self[pre + "bo"]

    def encode(self, z: Tensor, score_scale=None, record: AttentionRecord | None = None) -> Tensor:
        """Run every block on embedded tokens ``(n, T+1, d)`` and return the normalized class embedding."""
        for b in range(self.cfg.blocks):
            pre = f"block{b}."
            h = tn.layernorm(z, self[pre + "ln1.g"], self[pre + "ln1.b"])
            z = z + self._attention(h, b, score_scale, record)
            h = tn.layernorm(z, self[pre + "ln2.g"], self[pre + "ln2.b"])
            h = tn.gelu(tn.matmul(h, self[pre + "mlp.W1"]) + self[pre + "mlp.b1"])
            z = z + (tn.matmul(h, self[pre + "mlp.W2"]) + self[pre + "mlp.b2"])
        cls = z[:, 0, :]
        return tn.layernorm(cls, self["norm.g"], self["norm.b"])

    def head(self, features: Tensor) -> Tensor:
        return tn.matmul(features, self["head.W"]) + self["head.b"]

    def forward(self, seq: TokenSequence, record: bool = False, score_scale=None,
                return_features: bool = False):
        """Return ``(logits, record)``; ``record`` is ``None`` unless requested.

        ``score_scale`` multiplies the pre-softmax scores of every block and
        head column-wise; it has shape ``(n, T+1)``.  With
        ``return_features`` the normalized class embedding is appended.
        """
        self._count_forward()
        z = seq.tokens
        single = z.ndim == 2
        if single:
            z = tn.reshape(z, (1,) + z.shape)
        rec = AttentionRecord() if record else None
        feats = self.encode(z, score_scale, rec)
        logits = self.head(feats)
        if single:
            logits = logits[0]
            feats = feats[0]
        if return_features:
            return logits, rec, feats
        return logits, rec

    def predict(self, patches: np.ndarray, mask: np.ndarray | None = None, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack of patch inputs, computed without recording."""
        out = []
        for i in range(0, len(patches), batch_size):
            m = None if mask is None else mask[i:i + batch_size]
            logits, _ = self.forward(self.embed(patches[i:i + batch_size], m))
            out.append(logits.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.classes))

    # persistence --------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self.params, path)

    def load(self, path) -> None:
        for name, value in load_checkpoint(path).items():
            if name not in self.params:
                raise FormatError(f"checkpoint parameter {name!r} unknown to this model")
            self.set_param(name, value)


def loss_ce(logits: Tensor, label) -> Tensor:
    """Cross-entropy of one logit vector (or a batch, averaged) against integer labels."""
    return tn.cross_entropy(logits, label, reduction="mean")


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    pos = 5
    out: dict[str, np.ndarray] = {}

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"checkpoint truncated: needed {nbytes} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out
