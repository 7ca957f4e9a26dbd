"""Independent reference computations used by the test-suite."""

import itertools

import numpy as np


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def facility_location(dist, selected):
    """F(S) = sum_i max_{j in S} (C - d_ij) with C the largest pairwise distance."""
    if not selected:
        return 0.0
    c = dist.max()
    return float(np.sum(np.max(c - dist[:, list(selected)], axis=1)))


def brute_force_step_gains(dist, selected):
    """Best marginal gain over every unselected candidate, by enumeration."""
    base = facility_location(dist, selected)
    best = -np.inf
    for j in range(dist.shape[0]):
        if j in selected:
            continue
        best = max(best, facility_location(dist, list(selected) + [j]) - base)
    return best


def nnls_ridge_by_enumeration(G, target, lam):
    """Exact min_w ||G w - target||^2 + lam ||w||^2 subject to w >= 0.

    Enumerates supports, solves the normal equations on each and keeps the
    best feasible point.  Only for a handful of columns.
    """
    k = G.shape[1]
    best_w, best_obj = np.zeros(k), float(target @ target)
    for r in range(1, k + 1):
        for support in itertools.combinations(range(k), r):
            cols = list(support)
            Gs = G[:, cols]
            lhs = Gs.T @ Gs + lam * np.eye(r)
            w_s = np.linalg.solve(lhs, Gs.T @ target)
            if np.any(w_s < 0):
                continue
            w = np.zeros(k)
            w[cols] = w_s
            res = G @ w - target
            obj = float(res @ res + lam * w @ w)
            if obj < best_obj:
                best_w, best_obj = w, obj
    return best_w


def omp_reference(features, target, budget, lam):
    """Matching pursuit re-implemented with enumerated normal-equation solves.

    Atoms are compared by normalized correlation on the ridge-augmented
    system; returns the selected indices and the augmented residual norm
    after each step.
    """
    selected, norms = [], []
    residual = target.copy()
    col_norm = np.sqrt(np.sum(features**2, axis=1) + lam)
    for _ in range(budget):
        corr = np.abs(features @ residual) / col_norm
        corr[selected] = -np.inf
        j = int(np.argmax(corr))
        selected.append(j)
        G = features[selected].T
        w = nnls_ridge_by_enumeration(G, target, lam)
        residual = target - G @ w
        norms.append(float(np.sqrt(residual @ residual + lam * w @ w)))
        if norms[-1] < 1e-8:
            break
    return selected, norms
