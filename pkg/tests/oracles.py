"""Independent reference computations for the test suite.

Nothing here calls into ``rpe``; every oracle is a brute-force loop, an
enumeration, or a direct search.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, r = a.shape
    r2, n = b.shape
    assert r == r2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(r):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def two_pass_mean(items):
    """Mean of the rows, corrected by a second pass over the residuals."""
    items = [list(map(float, v)) for v in items]
    n = len(items)
    dim = len(items[0])
    first = [math.fsum(v[d] for v in items) / n for d in range(dim)]
    corr = [math.fsum(v[d] - first[d] for v in items) / n for d in range(dim)]
    return np.array([first[d] + corr[d] for d in range(dim)])


def euclid(x, y):
    return math.sqrt(math.fsum((float(a) - float(b)) ** 2 for a, b in zip(x, y)))


def sq_dist_loop(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += (float(x) - float(y)) ** 2
    return s


def set_distance_loops(a, b, metric):
    if metric == "nearest_neighbor":
        return min(euclid(x, y) for x in a for y in b)
    if metric == "chamfer":
        ab = math.fsum(min(euclid(x, y) for y in b) for x in a) / len(a)
        ba = math.fsum(min(euclid(x, y) for x in a) for y in b) / len(b)
        return ab + ba
    if metric == "mean":
        return euclid(two_pass_mean(a), two_pass_mean(b))
    raise ValueError(metric)


def full_sort_knn(vectors, target, k):
    """(index, squared distance) of the k nearest, ties by index."""
    scored = [(sq_dist_loop(v, target), i) for i, v in enumerate(vectors)]
    scored.sort()
    return [(i, d) for d, i in scored[:k]]


def affine_objective(Z, t, w, lam=0.0):
    """``||t - Z w||^2 + lam * ||w||_1`` evaluated for each row of ``w``."""
    w = np.atleast_2d(w)
    r = t[None, :] - w @ Z.T
    return np.einsum("ij,ij->i", r, r) + lam * np.abs(w).sum(axis=1)


def _embed(x):
    """Free coordinates -> weights on the hyperplane sum(w) == 1."""
    x = np.atleast_2d(x)
    return np.hstack([x, 1.0 - x.sum(axis=1, keepdims=True)])


def _directions(n_free, seed=0):
    dirs = []
    eye = np.eye(n_free)
    for i in range(n_free):
        dirs.append(eye[i])
    for i, j in itertools.combinations(range(n_free), 2):
        dirs.append(eye[i] - eye[j])
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((4 * n_free, n_free))
    dirs.extend(extra / np.linalg.norm(extra, axis=1, keepdims=True))
    dirs = np.array(dirs)
    return np.vstack([dirs, -dirs])


def pattern_search(f, x0, step=0.5, min_step=1e-13, max_iter=200_000):
    """Derivative-free descent over a fixed positive spanning set of directions."""
    x = np.array(x0, dtype=float)
    fx = f(x[None, :])[0]
    dirs = _directions(x.shape[0])
    it = 0
    while step > min_step and it < max_iter:
        it += 1
        cand = x[None, :] + step * dirs
        vals = f(cand)
        j = int(np.argmin(vals))
        if vals[j] < fx:
            x, fx = cand[j], vals[j]
            step *= 1.5
        else:
            step *= 0.5
    return x, fx


def grid_refine_minimize(Z, t, lam=0.0):
    """Minimize ``||t - Z w||^2 + lam ||w||_1`` on ``sum(w) == 1`` by grid then pattern search.

    Two free coordinates or fewer: grid step 0.1 on [-5, 5], then step 1e-3
    within +-0.1 of the best point. More: step 0.5 on [-4, 4]. Either way a
    pattern search finishes the job. Returns ``(w, objective)``.
    """
    Z = np.asarray(Z, dtype=float)
    t = np.asarray(t, dtype=float)
    n = Z.shape[1]
    if n == 1:
        w = np.ones(1)
        return w, float(affine_objective(Z, t, w, lam)[0])
    n_free = n - 1

    def f(x):
        return affine_objective(Z, t, _embed(x), lam)

    if n_free <= 2:
        axis = np.arange(-50, 51) * 0.1
        grid = np.array(list(itertools.product(axis, repeat=n_free)))
        best = grid[np.argmin(f(grid))]
        fine_axis = np.arange(-100, 101) * 1e-3
        fine = best + np.array(list(itertools.product(fine_axis, repeat=n_free)))
        best = fine[np.argmin(f(fine))]
    else:
        axis = np.arange(-8, 9) * 0.5
        grid = np.array(list(itertools.product(axis, repeat=n_free)))
        best = grid[np.argmin(f(grid))]
    x, fx = pattern_search(f, best, step=0.05)
    return _embed(x)[0], float(fx)


def grid_1d_minimize(Z, t, lam, step=1e-4, half_width=20.0):
    """Two references: scan w1 on a uniform grid, w2 = 1 - w1."""
    Z = np.asarray(Z, dtype=float)
    assert Z.shape[1] == 2
    w1 = np.arange(-half_width, half_width + step / 2, step)
    w = np.stack([w1, 1.0 - w1], axis=1)
    vals = affine_objective(Z, np.asarray(t, float), w, lam)
    j = int(np.argmin(vals))
    return w[j], float(vals[j])


def softmax_direct(d2, lam):
    """Unshifted softmax of ``-lam * d2`` using math.exp."""
    e = [math.exp(-lam * float(d)) for d in d2]
    s = math.fsum(e)
    return np.array([x / s for x in e])


def ranks_by_sorting(x):
    """Average ranks by explicit sort and grouping of equal values."""
    idx = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    pos = 0
    while pos < len(idx):
        end = pos
        while end + 1 < len(idx) and x[idx[end + 1]] == x[idx[pos]]:
            end += 1
        avg = (pos + end) / 2 + 1
        for q in range(pos, end + 1):
            ranks[idx[q]] = avg
        pos = end + 1
    return ranks


def spearman_sorting(x, y):
    rx, ry = ranks_by_sorting(list(x)), ranks_by_sorting(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


def mse_loop(W, X, Y):
    """Mean over samples of the squared error norm, by explicit loops."""
    total = 0.0
    for x, y in zip(X, Y):
        for o in range(len(y)):
            pred = 0.0
            for i in range(len(x)):
                pred += W[o][i] * x[i]
            total += (y[o] - pred) ** 2
    return total / len(X)


def normal_equations_fit(X, Y):
    """``B`` minimizing ``||Y - X B||_F`` from ``(X'X) B = X'Y``."""
    X = np.asarray(X, float)
    return np.linalg.solve(X.T @ X, X.T @ np.asarray(Y, float))
