"""Instance-level subset selection from last-layer gradient features."""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .vit import ViT

METHODS = ("random", "craig", "gradmatch")


@dataclass
class GradientFeature:
    sample_id: int
    g: np.ndarray


@dataclass
class CoresetSelection:
    indices: np.ndarray
    weights: np.ndarray
    method: str
    budget: int
    # per-step diagnostics: facility-location gains (craig) or residual norms (gradmatch)
    trace: list[float] = field(default_factory=list)
    # sample ids in the order the selector picked them
    order: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)


def per_sample_gradients(model: ViT, patches: np.ndarray, labels, sample_ids=None,
                         batch_size: int = 256) -> list[GradientFeature]:
    """Gradient of each sample's cross-entropy w.r.t. the classifier weights and bias.

    The head is linear in the final class embedding ``h``, so the gradient
    is ``outer(h, p - onehot)`` for the weights and ``p - onehot`` for the
    bias, flattened in that order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if sample_ids is None:
        sample_ids = np.arange(len(labels))
    view = model.detached()
    K = model.cfg.classes
    out = []
    for i in range(0, len(labels), batch_size):
        logits, _, feats = view.forward(view.embed(patches[i:i + batch_size]), return_features=True)
        z = logits.data
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        err = p - np.eye(K)[labels[i:i + batch_size]]
        gw = feats.data[:, :, None] * err[:, None, :]
        flat = np.concatenate([gw.reshape(len(err), -1), err], axis=1)
        out.extend(GradientFeature(int(sid), row) for sid, row in zip(sample_ids[i:i + batch_size], flat))
    return out


def _matrix(feats: list[GradientFeature]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([f.sample_id for f in feats], dtype=np.int64)
    G = np.stack([f.g for f in feats]) if feats else np.zeros((0, 0))
    return ids, G


def _check_budget(budget: int, n: int) -> None:
    if not 1 <= budget <= n:
        raise ContractError(f"budget must lie in [1, {n}], got {budget}")


def pairwise_distances(G: np.ndarray) -> np.ndarray:
    sq = (G * G).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * G @ G.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def craig_select(feats: list[GradientFeature], budget: int) -> CoresetSelection:
    """Lazy greedy maximization of a facility-location objective.

    Similarity is ``C - ||g_i - g_j||`` with ``C`` the largest pairwise
    distance.  Each chosen element is weighted by the number of samples for
    which it is the most similar chosen element.
    """
    ids, G = _matrix(feats)
    n = len(ids)
    _check_budget(budget, n)
    order = np.argsort(ids, kind="stable")
    ids, G = ids[order], G[order]
    dist = pairwise_distances(G)
    sim = dist.max() - dist
    best = np.zeros(n)
    # heap of (-gain bound, index, round the bound was computed in)
    heap = [(-float(sim[:, j].sum()), j, 0) for j in range(n)]
    heapq.heapify(heap)
    chosen: list[int] = []
    gains: list[float] = []
    while len(chosen) < budget:
        neg, j, stamp = heapq.heappop(heap)
        if stamp == len(chosen):
            chosen.append(j)
            gains.append(-neg)
            best = np.maximum(best, sim[:, j])
            continue
        gain = float(np.maximum(sim[:, j] - best, 0.0).sum())
        heapq.heappush(heap, (-gain, j, len(chosen)))
    chosen_arr = np.array(chosen)
    # nearest chosen element per sample; ties go to the lowest sample id
    by_id = np.sort(chosen_arr)
    nearest = by_id[np.argmax(sim[:, by_id], axis=1)]
    counts = np.array([np.sum(nearest == j) for j in by_id], dtype=np.float64)
    return CoresetSelection(ids[by_id], counts, "craig", budget, gains, [int(ids[j]) for j in chosen])


def nnls_ridge(A: np.ndarray, b: np.ndarray, lam: float, w0: np.ndarray | None = None,
               tol: float = 1e-10, max_sweeps: int = 1000) -> np.ndarray:
    """``argmin_{w >= 0} ||A w - b||^2 + lam ||w||^2`` by projected coordinate descent.

    The sweeps start from an active-set solution of the normal equations,
    which the first sweep usually confirms; ``w0`` is the fallback start
    if that solve fails.
    """
    Q = A.T @ A + lam * np.eye(A.shape[1])
    c = A.T @ b
    w = _active_set(Q, c)
    if w is None:
        w = np.zeros(A.shape[1]) if w0 is None else np.maximum(np.array(w0, dtype=np.float64), 0.0)
    diag = np.diag(Q)
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(len(w)):
            if diag[j] <= 0:
                continue
            new = max(0.0, w[j] - (Q[j] @ w - c[j]) / diag[j])
            delta = max(delta, abs(new - w[j]))
            w[j] = new
        if delta < tol:
            break
    return w


def _active_set(Q: np.ndarray, c: np.ndarray) -> np.ndarray | None:
    """Lawson-Hanson for ``min 0.5 w'Qw - c'w, w >= 0``; ``None`` if it stalls."""
    k = len(c)
    w = np.zeros(k)
    free = np.zeros(k, dtype=bool)
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    for _ in range(3 * k + 10):
        grad = c - Q @ w
        grad[free] = -np.inf
        j = int(np.argmax(grad)) if k else 0
        if not k or grad[j] <= 1e-14 * scale:
            return w
        free[j] = True
        while True:
            s = np.zeros(k)
            idx = np.flatnonzero(free)
            sub = Q[np.ix_(idx, idx)]
            try:
                s[idx] = np.linalg.solve(sub, c[idx])
            except np.linalg.LinAlgError:
                s[idx] = np.linalg.lstsq(sub, c[idx], rcond=None)[0]
            if np.all(s[idx] > 0):
                w = s
                break
            neg = idx[s[idx] <= 0]
            den = w[neg] - s[neg]
            alpha = float(np.min(np.where(den > 0, w[neg] / np.where(den > 0, den, 1.0), 0.0)))
            w = w + alpha * (s - w)
            free &= w > 1e-15
            w[~free] = 0.0
            if not free.any():
                break
    return None


def gradmatch_select(feats: list[GradientFeature], budget: int, lam: float = 0.5) -> CoresetSelection:
    """Orthogonal matching pursuit of the mean gradient with non-negative ridge weights.

    Pursuit runs on the ridge-augmented system ``[G^T; sqrt(lam) I] w ~ [g_mean; 0]``:
    the next atom maximizes ``|<g_j, r>| / sqrt(||g_j||^2 + lam)`` and the
    trace records the augmented residual ``sqrt(||r||^2 + lam ||w||^2)``,
    which equals ``||r||`` when ``lam == 0``.  If the residual vanishes before
    ``budget`` atoms are chosen, the rest are filled with zero weight in
    order of correlation with the mean.
    """
    if lam < 0:
        raise ContractError(f"L2 strength must be non-negative, got {lam}")
    ids, G = _matrix(feats)
    n = len(ids)
    _check_budget(budget, n)
    order = np.argsort(ids, kind="stable")
    ids, G = ids[order], G[order]
    target = G.mean(axis=0)
    scale = np.sqrt((G * G).sum(axis=1) + lam)
    scale = np.where(scale > 0, scale, np.inf)
    residual = target.copy()
    chosen: list[int] = []
    w = np.zeros(0)
    norms: list[float] = []
    while len(chosen) < budget:
        corr = np.abs(G @ residual) / scale
        corr[chosen] = -np.inf
        chosen.append(int(np.argmax(corr)))
        A = G[chosen].T
        w = nnls_ridge(A, target, lam, np.append(w, 0.0))
        residual = target - A @ w
        norms.append(float(np.sqrt(residual @ residual + lam * (w @ w))))
        if norms[-1] < 1e-8:
            break
    weights = list(w)
    if len(chosen) < budget:
        taken = set(chosen)
        rest = [int(j) for j in np.argsort(-np.abs(G @ target) / scale, kind="stable") if j not in taken]
        fill = rest[: budget - len(chosen)]
        chosen.extend(fill)
        weights.extend([0.0] * len(fill))
    chosen_arr = np.array(chosen)
    perm = np.argsort(chosen_arr)
    return CoresetSelection(ids[chosen_arr[perm]], np.array(weights)[perm], "gradmatch", budget, norms,
                            [int(ids[j]) for j in chosen])


def random_select(N: int, budget: int, seed) -> CoresetSelection:
    if not 0 <= budget <= N:
        raise ContractError(f"budget must lie in [0, {N}], got {budget}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(N, size=budget, replace=False))
    return CoresetSelection(idx, np.ones(budget), "random", budget)


def class_budgets(labels, budget: int) -> dict[int, int]:
    """Split ``budget`` over classes so shares differ by at most one where sizes allow."""
    classes, sizes = np.unique(np.asarray(labels), return_counts=True)
    if not 0 <= budget <= sizes.sum():
        raise ContractError(f"budget {budget} exceeds the {sizes.sum()} available samples")
    share = {int(c): 0 for c in classes}
    cap = {int(c): int(s) for c, s in zip(classes, sizes)}
    left = budget
    while left:
        open_ = [c for c in share if share[c] < cap[c]]
        low = min(share[c] for c in open_)
        for c in open_:
            if left and share[c] == low:
                share[c] += 1
                left -= 1
    return share


def select(method: str, features: list[GradientFeature] | None, labels, budget: int, *,
           balanced: bool = True, lam: float = 0.5, seed=0) -> CoresetSelection:
    """Run a selector over the pool, optionally per class with balanced budgets.

    ``features`` may be ``None`` for the random method; indices then refer to
    row positions in ``labels``.
    """
    if method not in METHODS:
        raise ContractError(f"unknown coreset method {method!r}; expected one of {METHODS}")
    labels = np.asarray(labels)
    n = len(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if features is None:
        features = [GradientFeature(i, np.zeros(1)) for i in range(n)]
    groups = class_budgets(labels, budget) if balanced else {None: budget}
    parts = []
    for cls, b in groups.items():
        rows = np.arange(n) if cls is None else np.where(labels == cls)[0]
        if b == 0:
            continue
        pool = [features[i] for i in rows]
        if method == "random":
            pick = random_select(len(pool), b, rng)
            sel = CoresetSelection([pool[i].sample_id for i in pick.indices], pick.weights, "random", b)
        elif method == "craig":
            sel = craig_select(pool, b)
        else:
            sel = gradmatch_select(pool, b, lam)
        parts.append(sel)
    idx = np.concatenate([p.indices for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    wts = np.concatenate([p.weights for p in parts]) if parts else np.zeros(0)
    order = np.argsort(idx, kind="stable")
    trace = [v for p in parts for v in p.trace]
    return CoresetSelection(idx[order], wts[order], method, budget, trace)


def export_selection_csv(path, selection: CoresetSelection) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "weight", "method", "budget"])
        for i, wt in zip(selection.indices, selection.weights):
            w.writerow([int(i), repr(float(wt)), selection.method, selection.budget])
