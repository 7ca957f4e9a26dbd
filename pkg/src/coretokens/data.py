"""Image datasets: IDX files and a synthetic shape generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .vit import PatchConfig, patchify

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MOTIF = 6
GLYPH = 2 * MOTIF + 1


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    # pixels drawn by the generator before noise; None for loaded data
    support: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def patches(self, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
        """Raster-ordered flat patches ``(N, T, D)``; grayscale images gain a channel axis."""
        imgs = self.images[..., None] if self.images.ndim == 3 else self.images
        return patchify(imgs, cfg)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        sup = None if self.support is None else self.support[rows]
        return Dataset(self.images[rows], self.labels[rows], sup)


# IDX ---------------------------------------------------------------------

def _read(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file is too short for a header: {len(raw)} bytes", 0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{what} header needs {head} bytes, file has {len(raw)}", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    expected = int(np.prod(dims))
    actual = len(raw) - head
    if actual != expected:
        raise FormatError(f"{what} payload: expected {expected} bytes for dims {dims}, found {actual}", head)
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = _parse_idx(_read(images_path), IMAGE_MAGIC, "image")
    labels = _parse_idx(_read(labels_path), LABEL_MAGIC, "label")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ContractError(f"IDX payload must be uint8, got {array.dtype}")
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(array.ndim)
    if magic is None:
        raise ContractError(f"IDX writer handles 1-D labels or 3-D images, got {array.ndim}-D")
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    with open(path, "wb") as fh:
        fh.write(head + array.tobytes())


def save_cache(path, data: Dataset) -> None:
    extra = {} if data.support is None else {"support": data.support}
    with open(path, "wb") as fh:
        np.savez(fh, images=data.images, labels=data.labels, **extra)


def load_cache(path) -> Dataset:
    try:
        with np.load(path) as z:
            return Dataset(z["images"], z["labels"], z["support"] if "support" in z else None)
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read dataset cache {path}: {exc}") from exc


# synthetic shapes --------------------------------------------------------

def _motifs() -> list[np.ndarray]:
    m = MOTIF
    mid = slice(m // 2 - 1, m // 2 + 1)
    out = []

    def new():
        return np.zeros((m, m))

    a = new(); a[mid, :] = 1; out.append(a)                              # horizontal bar
    a = new(); a[:, mid] = 1; out.append(a)                              # vertical bar
    a = new(); a[[0, -1], :] = 1; a[:, [0, -1]] = 1; out.append(a)       # box outline
    a = new(); a[mid, :] = 1; a[:, mid] = 1; out.append(a)               # plus
    diag = np.eye(m)
    out.append(diag)                                                     # main diagonal
    out.append(diag[:, ::-1].copy())                                     # anti-diagonal
    out.append(np.maximum(diag, diag[:, ::-1]))                          # x
    a = new(); a[:, :2] = 1; a[-2:, :] = 1; out.append(a)                # L
    a = new(); a[:2, :] = 1; a[:, mid] = 1; out.append(a)                # T
    a = new(); a[1:-1, 1:-1] = 1; out.append(a)                          # filled square
    return out


def _tile(motif: np.ndarray) -> np.ndarray:
    """Four copies of a motif in a 2x2 arrangement, one pixel apart."""
    g = np.zeros((GLYPH, GLYPH))
    for r in (0, MOTIF + 1):
        for c in (0, MOTIF + 1):
            g[r:r + MOTIF, c:c + MOTIF] = motif
    return g


MOTIFS = _motifs()
GLYPHS = [_tile(m) for m in MOTIFS]


def _place(templates, labels, rng, size, patch):
    """Draw each template inside a random patch-aligned 2x2 cell with pixel jitter."""
    cells = size // patch - 1
    slack = 2 * patch - GLYPH
    clean = np.zeros((len(labels), size, size))
    cell = rng.integers(0, cells, size=(len(labels), 2)) * patch
    jitter = rng.integers(0, slack + 1, size=(len(labels), 2))
    for i, (lab, (r, c)) in enumerate(zip(labels, cell + jitter)):
        clean[i, r:r + GLYPH, c:c + GLYPH] = templates[lab]
    return clean


def gen_synthetic(classes: int, per_class: int, seed: int, *, noise: float = 0.1,
                  size: int = 28, patch: int = 7) -> Dataset:
    """Each class is one shape on a blank image plus Gaussian pixel noise.

    The shape is drawn four times in a 2x2 arrangement inside a random 2x2
    block of patches (jittered by up to one pixel), so every copy lies in
    its own patch and the glyph touches four of the ``(size / patch)^2``
    patches.  Samples are shuffled; ``support`` records the glyph pixels.
    """
    if not 2 <= classes <= len(GLYPHS):
        raise ContractError(f"classes must lie in [2, {len(GLYPHS)}], got {classes}")
    if per_class < 1:
        raise ContractError(f"per_class must be positive, got {per_class}")
    if patch != MOTIF + 1 or size % patch:
        raise ContractError(f"patch side {patch} does not fit the {MOTIF}-pixel shapes on a {size} grid")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(classes), per_class))
    clean = _place(GLYPHS, labels, rng, size, patch)
    images = clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean.copy()
    return Dataset(images, labels, clean > 0)


def gen_patterns(classes: int, per_class: int, seed: int, *, density: float = 0.35,
                 noise: float = 0.1, size: int = 28, patch: int = 7) -> Dataset:
    """Pretext data: tiled random binary motifs placed like :func:`gen_synthetic` glyphs.

    Templates come from ``seed`` and never coincide with a glyph, so a
    backbone trained on them has not seen the evaluation classes.
    """
    if classes < 2 or per_class < 1:
        raise ContractError(f"need at least 2 classes and 1 sample per class, got {classes}, {per_class}")
    rng = np.random.default_rng(seed)
    templates = []
    known = {g.tobytes() for g in GLYPHS}
    while len(templates) < classes:
        t = _tile((rng.random((MOTIF, MOTIF)) < density).astype(np.float64))
        if t.any() and t.tobytes() not in known:
            known.add(t.tobytes())
            templates.append(t)
    labels = rng.permutation(np.repeat(np.arange(classes), per_class))
    clean = _place(templates, labels, rng, size, patch)
    images = clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean.copy()
    return Dataset(images, labels, clean > 0)


def patch_support(support: np.ndarray, patch: int = 7) -> np.ndarray:
    """``(N, T)`` flags of patches containing any drawn pixel, raster order."""
    n, h, w = support.shape
    g = h // patch
    blocks = support.reshape(n, g, patch, g, patch)
    return blocks.any(axis=(2, 4)).reshape(n, g * g)
