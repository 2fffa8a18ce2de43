"""Ensemble weights from reference and target representations.

Five strategies:

* ``average``    uniform ``1/n``
* ``similarity`` softmax of ``-lambda1 * d_i^2``
* ``linear``     ``argmin ||t - Z w||^2`` subject to ``sum(w) == 1``
* ``linear_l1``  the same objective plus ``lambda2 * ||w||_1``, solved by ADMM
* ``top1``       all weight on the nearest reference

``Z`` holds one reference representation per column. The constraint is the
hyperplane ``sum(w) == 1``; weights may be negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .adapters import AdapterDelta, weighted_sum
from .errors import ConfigError, DomainError, ShapeError
from .registry import Registry, RetrievalResult, squared_distances
from .representation import FeatureSet, as_vector, mean_pool

log = logging.getLogger(__name__)

METHODS = ("average", "similarity", "linear", "linear_l1", "top1")


@dataclass(frozen=True)
class SolverConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    max_iterations: int = 10_000
    tolerance: float = 1e-8
    rho: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and self.lambda1 > 0):
            raise ConfigError(f"lambda1 must be positive, got {self.lambda1}")
        if not (np.isfinite(self.lambda2) and self.lambda2 >= 0):
            raise ConfigError(f"lambda2 must be non-negative, got {self.lambda2}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be a positive integer, got {self.max_iterations}")
        if not (np.isfinite(self.tolerance) and self.tolerance > 0):
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ConfigError(f"rho must be positive, got {self.rho}")


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    method: str
    ids: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.weights.shape[0]

    def report(self, config: SolverConfig | None = None) -> dict:
        """JSON-ready weight report."""
        diag = self.diagnostics
        return {
            "method": self.method,
            "ids": list(self.ids),
            "weights": [float(w) for w in self.weights],
            "residual_norm": _maybe_float(diag.get("residual_norm")),
            "iterations": diag.get("iterations"),
            "objective": _maybe_float(diag.get("objective")),
            "lambda1": config.lambda1 if config else None,
            "lambda2": config.lambda2 if config else None,
        }


def _maybe_float(x):
    return None if x is None else float(x)


def _stack(refs, target) -> tuple[np.ndarray, np.ndarray]:
    """Reference matrix with one column per reference, plus the target vector."""
    target = as_vector(target, "target")
    refs = np.asarray(refs, dtype=np.float64)
    if refs.ndim == 1:
        refs = refs[None, :]
    if refs.ndim != 2 or refs.shape[0] == 0:
        raise ShapeError("need at least one reference vector")
    if refs.shape[1] != target.shape[0]:
        raise ShapeError(
            f"references have dim {refs.shape[1]}, target has dim {target.shape[0]}"
        )
    if not np.all(np.isfinite(refs)):
        raise ValueError("reference vectors contain NaN or Inf")
    return np.ascontiguousarray(refs.T), target


def _finish(w: np.ndarray, method: str, ids, diagnostics) -> WeightVector:
    w = np.array(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{method}: solver produced non-finite weights")
    w.setflags(write=False)
    return WeightVector(w, method, tuple(ids or ()), diagnostics)


def lsq_objective(Z: np.ndarray, t: np.ndarray, w: np.ndarray, lambda2: float = 0.0) -> float:
    r = t - Z @ w
    return float(r @ r + lambda2 * np.abs(w).sum())


# -- average / top1 ----------------------------------------------------


def weights_average(n: int, ids=None) -> WeightVector:
    if n < 1:
        raise DomainError(f"need at least one reference, got n={n}")
    return _finish(np.full(n, 1.0 / n), "average", ids, {})


def weights_top1(retrieval: RetrievalResult | Sequence) -> WeightVector:
    n = len(retrieval)
    if n == 0:
        raise DomainError("top1 needs a non-empty retrieval")
    w = np.zeros(n)
    w[0] = 1.0
    ids = retrieval.ids if isinstance(retrieval, RetrievalResult) else None
    return _finish(w, "top1", ids, {})


# -- similarity ----------------------------------------------------------


def softmax_weights(sq_dists, lambda1: float) -> np.ndarray:
    """``exp(-lambda1 * d2) / sum(...)`` with the minimum distance shifted to zero."""
    d2 = np.asarray(sq_dists, dtype=np.float64)
    logits = -lambda1 * (d2 - d2.min())
    e = np.exp(logits)
    return e / e.sum()


def weights_similarity(refs, target, config: SolverConfig = SolverConfig(), ids=None) -> WeightVector:
    Z, t = _stack(refs, target)
    d2 = squared_distances(Z.T, t)
    return _finish(softmax_weights(d2, config.lambda1), "similarity", ids, {})


# -- linear --------------------------------------------------------------


def solve_affine_lsq(Z: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm minimizer of ``||t - Z w||^2`` subject to ``sum(w) == 1``.

    Solves the bordered system ``[[Z'Z, 1], [1', 0]] [w; mu] = [Z't; 1]``.
    When it is singular, a least-squares solve picks one solution and the
    component lying in ``null([Z; 1'])`` (the directions along which every
    minimizer differs) is projected out. Returns ``(w, mu)``; at the solution
    ``Z'(t - Z w) == mu * 1``.
    """
    n = Z.shape[1]
    if n == 1:
        r = t - Z[:, 0]
        return np.ones(1), float(Z[:, 0] @ r)
    ones = np.ones(n)
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = Z.T @ Z
    K[:n, n] = ones
    K[n, :n] = ones
    rhs = np.concatenate([Z.T @ t, [1.0]])

    sol, _, rank, _ = np.linalg.lstsq(K, rhs, rcond=None)
    w = sol[:n]
    if rank < n + 1:
        A = np.vstack([Z, ones[None, :]])
        null = scipy.linalg.null_space(A)
        if null.size:
            w = w - null @ (null.T @ w)
    return w, float(sol[n])


def weights_linear(refs, target, config: SolverConfig = SolverConfig(), ids=None) -> WeightVector:
    Z, t = _stack(refs, target)
    w, mu = solve_affine_lsq(Z, t)
    residual = t - Z @ w
    return _finish(
        w,
        "linear",
        ids,
        {
            "residual_norm": float(np.linalg.norm(residual)),
            "objective": float(residual @ residual),
            "multiplier": mu,
            "iterations": 1,
        },
    )


# -- linear + l1 ---------------------------------------------------------


def soft_threshold(x: np.ndarray, kappa: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


def _signed_support_solve(Z, t, lambda2, support, signs):
    """Minimize the penalized objective with the support and signs held fixed.

    Returns ``None`` if the solution leaves the sign pattern.
    """
    n = Z.shape[1]
    S = np.flatnonzero(support)
    if S.size == 0:
        return None
    Zs = Z[:, S]
    m = S.size
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = 2.0 * (Zs.T @ Zs)
    K[:m, m] = 1.0
    K[m, :m] = 1.0
    rhs = np.concatenate([2.0 * (Zs.T @ t) - lambda2 * signs[S], [1.0]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:m]
    if np.any(sol * signs[S] < 0):
        return None
    w = np.zeros(n)
    w[S] = sol
    return w


def weights_linear_l1(refs, target, config: SolverConfig = SolverConfig(), ids=None) -> WeightVector:
    """ADMM on ``||t - Z w||^2 + lambda2 ||v||_1`` with ``w == v`` and ``sum(w) == 1``.

    Each iteration solves the bordered system for ``w``, soft-thresholds
    ``w + u`` at ``lambda2 / rho`` for ``v``, then updates the scaled dual
    ``u``. The returned weights are the best feasible iterate seen, which
    starts at the unpenalized minimizer, so the result is never worse than
    it. A final pass re-solves on the sign pattern of ``v`` to land exactly
    on a kink when ADMM has only approached it.
    """
    Z, t = _stack(refs, target)
    n = Z.shape[1]
    lam, rho, tol = config.lambda2, config.rho, config.tolerance

    w0, _ = solve_affine_lsq(Z, t)
    best_w = w0
    best_obj = lsq_objective(Z, t, w0, lam)
    trace = [best_obj]

    if n == 1 or lam == 0.0:
        return _finish(
            best_w,
            "linear_l1",
            ids,
            {
                "objective": best_obj,
                "residual_norm": float(np.linalg.norm(t - Z @ best_w)),
                "iterations": 0,
                "converged": True,
                "objective_trace": trace,
            },
        )

    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = 2.0 * (Z.T @ Z) + rho * np.eye(n)
    K[:n, n] = 1.0
    K[n, :n] = 1.0
    lu = scipy.linalg.lu_factor(K)
    Ztt2 = 2.0 * (Z.T @ t)

    v = w0.copy()
    u = np.zeros(n)
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        w = scipy.linalg.lu_solve(lu, np.concatenate([Ztt2 + rho * (v - u), [1.0]]))[:n]
        v_old = v
        v = soft_threshold(w + u, lam / rho)
        u = u + w - v

        obj = lsq_objective(Z, t, w, lam)
        if obj < best_obj:
            best_obj, best_w = obj, w
            trace.append(obj)

        r_norm = np.linalg.norm(w - v)
        s_norm = rho * np.linalg.norm(v - v_old)
        if r_norm < tol and s_norm < tol:
            converged = True
            break

    signs = np.sign(v)
    polished = _signed_support_solve(Z, t, lam, signs != 0, signs)
    if polished is not None:
        obj = lsq_objective(Z, t, polished, lam)
        if obj < best_obj:
            best_obj, best_w = obj, polished
            trace.append(obj)

    if not converged:
        log.warning("linear_l1: no convergence after %d iterations", it)
    return _finish(
        best_w,
        "linear_l1",
        ids,
        {
            "objective": best_obj,
            "residual_norm": float(np.linalg.norm(t - Z @ best_w)),
            "iterations": it,
            "converged": converged,
            "objective_trace": trace,
        },
    )


# -- dispatch and pipeline ----------------------------------------------


def compute_weights(
    method: str,
    refs,
    target,
    config: SolverConfig = SolverConfig(),
    ids=None,
) -> WeightVector:
    """Weights for references already ordered nearest first."""
    if method == "average":
        return weights_average(len(refs), ids)
    if method == "top1":
        w = weights_top1(list(range(len(refs))))
        return WeightVector(w.weights, "top1", tuple(ids or ()), {})
    if method == "similarity":
        return weights_similarity(refs, target, config, ids)
    if method == "linear":
        return weights_linear(refs, target, config, ids)
    if method == "linear_l1":
        return weights_linear_l1(refs, target, config, ids)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def run_pipeline(
    registry: Registry,
    target: FeatureSet | np.ndarray,
    method: str = "linear",
    config: SolverConfig = SolverConfig(),
    exclude: Sequence[str] = (),
    k: int | None = None,
) -> tuple[WeightVector, AdapterDelta]:
    """Pool the target, retrieve neighbours, weight them and merge their adapters.

    Returns the weights and the merged delta; adding it to base parameters is
    left to :func:`rpe.adapters.apply`.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    z = mean_pool(target) if isinstance(target, FeatureSet) else as_vector(target, "target")
    hits = registry.retrieve(z, k=k, exclude=exclude)
    refs = np.stack([registry.entry(i).representation for i in hits.ids])
    weights = compute_weights(method, refs, z, config, hits.ids)
    weights.diagnostics.setdefault("squared_distances", [float(d) for d in hits.squared_distances])
    delta = weighted_sum([registry.adapter(i) for i in hits.ids], weights.weights, hits.ids)
    return weights, delta
