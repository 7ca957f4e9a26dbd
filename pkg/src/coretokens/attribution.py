"""Per-token relevance scores and top-k core token selection.

Every strategy reads relevance from the class-token row and returns one
score per patch token (the class token itself is never scored or
selected).  Scores are batched: arrays have shape ``(n, T)``.

Strategies:

* ``rollout``  -- product over blocks of head-averaged attention plus identity.
* ``gradcam``  -- last-block attention weighted by its gradient.
* ``gradlrp``  -- product over blocks of ``I + mean_h(relu(grad_A * A))``.
* ``atman``    -- loss change when a token's pre-softmax scores (and those of
  cosine-similar tokens) are suppressed.
* ``random``   -- uniform positions, for the baseline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, StateError
from .tensor import Tape, Tensor
from .vit import AttentionRecord, TokenSequence, ViT

STRATEGIES = ("rollout", "gradcam", "gradlrp", "atman", "random")


@dataclass
class RelevanceMap:
    """Influence matrix ``(n, T+1, T+1)``; row 0 is the classification relevance."""

    S: np.ndarray

    def class_row(self) -> np.ndarray:
        return self.S[..., 0, 1:]


@dataclass
class TokenScores:
    scores: np.ndarray
    strategy: str

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))

    @property
    def num_tokens(self) -> int:
        return self.scores.shape[1]


@dataclass
class CoreTokens:
    """Selected patch positions (1-based, sorted per row) and their payloads."""

    positions: np.ndarray
    values: np.ndarray | None
    retention: float


def retained_count(rate: float, total: int) -> int:
    """``ceil(rate * total)`` robust to float noise in the product."""
    return min(total, max(0, math.ceil(rate * total - 1e-9)))


def _check_rate(R: float) -> None:
    if not 0 < R <= 1:
        raise ContractError(f"retention rate must lie in (0, 1], got {R}")


# influence matrices -----------------------------------------------------

def _head_mean(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=1)


def _chain(factors: list[np.ndarray]) -> np.ndarray:
    S = factors[0]
    for F in factors[1:]:
        S = S @ F
    return S


def rollout_map(rec: AttentionRecord, normalize: bool = True) -> RelevanceMap:
    """``S = A_1 A_2 ... A_B`` over head-averaged maps.

    With ``normalize`` each factor is ``rownorm(mean_h(A) + I)``; without,
    the raw head-averaged maps are multiplied.
    """
    factors = []
    for A in rec.maps:
        F = _head_mean(A.data)
        if normalize:
            F = F + np.eye(F.shape[-1])
            F = F / F.sum(axis=-1, keepdims=True)
        factors.append(F)
    return RelevanceMap(_chain(factors))


def gradlrp_map(rec: AttentionRecord) -> RelevanceMap:
    factors = []
    for b, A in enumerate(rec.maps):
        if A.grad is None:
            raise StateError(f"attention gradients missing for block {b}; run a backward pass first")
        F = _head_mean(np.maximum(A.grad * A.data, 0.0))
        factors.append(np.eye(F.shape[-1]) + F)
    return RelevanceMap(_chain(factors))


def rollout_scores(rec: AttentionRecord, normalize: bool = True) -> TokenScores:
    return TokenScores(rollout_map(rec, normalize).class_row(), "rollout")


def gradcam_scores(rec: AttentionRecord) -> TokenScores:
    A = rec.maps[-1]
    if A.grad is None:
        raise StateError("attention gradients of the last block are missing; run a backward pass first")
    cam = np.maximum(_head_mean(A.grad * A.data), 0.0)
    return TokenScores(cam[..., 0, 1:], "gradcam")


def gradlrp_scores(rec: AttentionRecord) -> TokenScores:
    return TokenScores(gradlrp_map(rec).class_row(), "gradlrp")


def record_with_gradients(model: ViT, seq: TokenSequence, labels) -> AttentionRecord:
    """Forward with recording, then backpropagate the summed loss of ``labels``.

    Runs on a detached view so model parameter gradients are untouched.
    """
    view = model.detached()
    tokens = seq.tokens.data
    if tokens.ndim == 2:
        tokens = tokens[None]
    leaf = TokenSequence(Tensor(tokens, requires_grad=True), seq.positions, np.atleast_2d(seq.mask))
    with Tape() as tape:
        logits, rec = view.forward(leaf, record=True)
        loss = tn.cross_entropy(logits, np.atleast_1d(labels), reduction="sum")
    tape.backward(loss)
    return rec


# perturbation -----------------------------------------------------------

def token_similarity(tokens: np.ndarray) -> np.ndarray:
    """Cosine similarity between patch tokens, ``(n, T, T)`` with a unit diagonal."""
    x = tokens[:, 1:, :]
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    u = x / np.maximum(norm, 1e-12)
    s = np.clip(u @ np.swapaxes(u, -1, -2), -1.0, 1.0)
    idx = np.arange(s.shape[-1])
    s[:, idx, idx] = 1.0
    return s


def suppression_factors(sim: np.ndarray, t: int, f: float, eta: float) -> np.ndarray:
    """Column multipliers ``(n, T+1)`` that suppress patch ``t`` and its similar peers.

    A peer ``k`` with similarity ``s`` to ``t`` in ``[eta, 1]`` is scaled by
    ``1 - f * s``; all other columns, including the class token, keep 1.
    """
    s = sim[:, t, :]
    gate = np.where((s >= eta) & (s <= 1.0), s, 0.0)
    out = np.ones((sim.shape[0], sim.shape[1] + 1))
    out[:, 1:] = (1.0 - f) + f * (1.0 - gate)
    return out


def atman_scores(seq: TokenSequence, model: ViT, labels, f: float = 0.9, eta: float = 0.7) -> TokenScores:
    """Loss increase from suppressing each patch token; ``T + 1`` forward passes."""
    if not 0 <= f <= 1:
        raise ContractError(f"suppression factor must lie in [0, 1], got {f}")
    if not 0 <= eta <= 1:
        raise ContractError(f"similarity threshold must lie in [0, 1], got {eta}")
    return _atman(seq, model, labels, f, eta)


def _atman(seq, model, labels, f, eta):
    tokens = seq.tokens.data
    if tokens.ndim == 2:
        tokens = tokens[None]
    z = Tensor._wrap(tokens, False)
    batch = TokenSequence(z, seq.positions, np.atleast_2d(seq.mask))
    labels = np.atleast_1d(labels)
    view = model.detached()
    clean = tn.cross_entropy(view.forward(batch)[0], labels, reduction="none").data
    sim = token_similarity(tokens)
    T = tokens.shape[1] - 1
    out = np.zeros((tokens.shape[0], T))
    for t in range(T):
        scale = suppression_factors(sim, t, f, eta)
        logits, _ = view.forward(batch, score_scale=scale)
        out[:, t] = tn.cross_entropy(logits, labels, reduction="none").data - clean
    return TokenScores(out, "atman")


# dispatch ---------------------------------------------------------------

def score_tokens(strategy: str, model: ViT, patches: np.ndarray, labels, *, f: float = 0.9,
                 eta: float = 0.7, batch_size: int = 128) -> TokenScores:
    """Score every patch token of ``(n, T, D)`` inputs with the named strategy."""
    if strategy not in STRATEGIES or strategy == "random":
        raise ContractError(f"no scoring rule for strategy {strategy!r}")
    labels = np.asarray(labels)
    chunks = []
    for i in range(0, len(patches), batch_size):
        seq = model.embed(patches[i:i + batch_size])
        y = labels[i:i + batch_size]
        if strategy == "rollout":
            _, rec = model.detached().forward(seq, record=True)
            chunks.append(rollout_scores(rec).scores)
        elif strategy == "atman":
            chunks.append(atman_scores(seq, model, y, f, eta).scores)
        else:
            rec = record_with_gradients(model, seq, y)
            fn = gradcam_scores if strategy == "gradcam" else gradlrp_scores
            chunks.append(fn(rec).scores)
    return TokenScores(np.concatenate(chunks, axis=0), strategy)


def select_top_k(scores: TokenScores, R: float, patches: np.ndarray | None = None) -> CoreTokens:
    """Keep the ``ceil(R*T)`` highest-scoring patches per sample; ties go to lower positions."""
    _check_rate(R)
    s = scores.scores
    k = retained_count(R, s.shape[1])
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    positions = np.sort(order, axis=1) + 1
    return CoreTokens(positions, _gather(patches, positions), R)


def select_random(n: int, T: int, R: float, rng: np.random.Generator,
                  patches: np.ndarray | None = None) -> CoreTokens:
    """Uniform positions without replacement, same cardinality as :func:`select_top_k`."""
    _check_rate(R)
    k = retained_count(R, T)
    positions = np.array([np.sort(rng.choice(T, size=k, replace=False)) for _ in range(n)],
                         dtype=np.int64).reshape(n, k) + 1
    return CoreTokens(positions, _gather(patches, positions), R)


def _gather(patches, positions):
    if patches is None:
        return None
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    return np.take_along_axis(patches, (positions - 1)[..., None], axis=1)


def export_relevance_csv(path, sample_ids, scores: TokenScores) -> None:
    """One row per (sample, patch position) with its score."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "strategy", "position", "score"])
        for sid, row in zip(sample_ids, scores.scores):
            for pos, val in enumerate(row, start=1):
                w.writerow([int(sid), scores.strategy, pos, repr(float(val))])
