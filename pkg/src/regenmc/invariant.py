"""Invariant measure families by backward products, and ergodic-rate fits.

The backward product ``P_{k-n, k}`` of a contracting family collapses to a
rank-one matrix as the horizon ``n`` grows; any of its rows then approximates
the invariant measure at time ``k``.  The acceptance residual is the maximum
total-variation disagreement between two rows, which bounds the distance of
any row to the limit.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass

import numpy as np

from .conditions import _v_vector
from .kernels import (
    FiniteKernelFamily,
    ObservableG,
    ProbMeasure,
    compose_interval,
    pushforward,
    tv_distance,
)


class ConvergenceError(RuntimeError):
    """Backward products failed to collapse within the allowed depth."""


_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def clear_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


@dataclass
class InvariantFamily:
    """Per-time invariant measures with their convergence metadata."""

    states: tuple
    mu: dict
    depth: dict
    residuals: dict

    @property
    def depth_used(self) -> int:
        return max(self.depth.values()) if self.depth else 0

    @property
    def residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0

    def times(self) -> list:
        return sorted(self.mu)

    def weights_at(self, k: int) -> np.ndarray:
        if k not in self.mu:
            raise KeyError(f"no invariant measure stored for time {k}")
        return self.mu[k].weights

    def mean_of(self, g, k: int) -> float:
        values = g.values(self.states) if isinstance(g, ObservableG) else np.asarray(g, float)
        return float(self.weights_at(k) @ values)


@dataclass(frozen=True)
class ErgodicityFit:
    """Fitted exponential forgetting bound ``M_tilde * alpha^m * (1 + V(x))``."""

    alpha: float
    M_tilde: float
    fit_range: tuple[int, int]
    residual_norm: float
    n_points: int
    degenerate: bool = False


@dataclass(frozen=True)
class InvarianceReport:
    max_tv_violation: float
    worst_pair: tuple

    def to_dict(self) -> dict:
        return {"max_tv_violation": self.max_tv_violation, "worst_pair": list(self.worst_pair)}


# ---------------------------------------------------------------------------
# backward products
# ---------------------------------------------------------------------------


def _row_disagreement(M: np.ndarray) -> float:
    """Max total-variation distance between any two rows of a matrix."""
    d = np.abs(M[:, None, :] - M[None, :, :]).sum(axis=-1)
    return float(d.max())


def solve_backward(fam: FiniteKernelFamily, k: int, tol: float = 1e-12,
                   max_depth: int = 200, *, initial_depth: int = 1,
                   return_history: bool = False):
    """Invariant measure at time ``k`` from backward products.

    Starting from ``P_{k-initial_depth, k}``, repeatedly prepend one more
    step until the rows of the product agree within ``tol`` in total
    variation.  Returns ``(measure, depth, residual)``; with
    ``return_history=True`` a list of per-depth residuals is appended.

    Raises
    ------
    ConvergenceError
        If the residual is still above ``tol`` at ``max_depth``; this
        signals a family without the needed contraction.
    """
    if fam.kind != "finite":
        raise ValueError("backward products require a finite kernel family")
    if initial_depth < 1:
        raise ValueError("initial_depth must be at least 1")
    M = compose_interval(fam, k - initial_depth, k)
    depth = initial_depth
    history = []
    while True:
        residual = _row_disagreement(M)
        history.append(residual)
        if residual <= tol:
            weights = M[0] / M[0].sum()
            mu = ProbMeasure(fam.states, weights)
            if return_history:
                return mu, depth, residual, history
            return mu, depth, residual
        if depth >= max_depth:
            raise ConvergenceError(
                f"row disagreement {residual:.3e} above tol {tol:.1e} at depth {max_depth} "
                f"for time {k}"
            )
        depth += 1
        M = fam.matrix_at(k - depth) @ M


def _solve_backward_batch(fam, ks, tol, max_depth):
    """Vectorized backward solve over many target times at once."""
    ks = np.asarray(ks, dtype=int)
    S = len(fam.states)
    M = fam.matrices_at(ks - 1).copy()
    depth = 1
    depths = np.zeros(ks.size, dtype=int)
    residuals = np.zeros(ks.size)
    frozen = np.zeros((ks.size, S))
    active = np.ones(ks.size, dtype=bool)
    while active.any():
        disagree = np.abs(M[:, :, None, :] - M[:, None, :, :]).sum(axis=-1).max(axis=(1, 2))
        done = active & (disagree <= tol)
        if done.any():
            rows = M[done, 0, :]
            frozen[done] = rows / rows.sum(axis=1, keepdims=True)
            depths[done] = depth
            residuals[done] = disagree[done]
            active &= ~done
        if not active.any():
            break
        if depth >= max_depth:
            worst = int(np.argmax(np.where(active, disagree, -np.inf)))
            raise ConvergenceError(
                f"row disagreement {disagree[worst]:.3e} above tol {tol:.1e} at depth "
                f"{max_depth} for time {int(ks[worst])}"
            )
        depth += 1
        prev = fam.matrices_at(ks[active] - depth)
        M[active] = np.matmul(prev, M[active])
    return frozen, depths, residuals


def solve_family(fam: FiniteKernelFamily, ks, tol: float = 1e-12,
                 max_depth: int = 200) -> InvariantFamily:
    """Solve a whole family of invariant measures, with per-model caching."""
    ks = [int(k) for k in ks]
    model_hash = fam.content_hash()
    mu, depth, residuals = {}, {}, {}
    missing = []
    with _CACHE_LOCK:
        for k in ks:
            hit = _CACHE.get((model_hash, k, tol))
            if hit is not None:
                w, d, r = hit
                mu[k] = ProbMeasure(fam.states, w)
                depth[k], residuals[k] = d, r
            else:
                missing.append(k)
    if missing:
        weights, depths, resid = _solve_backward_batch(fam, missing, tol, max_depth)
        with _CACHE_LOCK:
            for i, k in enumerate(missing):
                _CACHE[(model_hash, k, tol)] = (weights[i], int(depths[i]), float(resid[i]))
        for i, k in enumerate(missing):
            mu[k] = ProbMeasure(fam.states, weights[i])
            depth[k] = int(depths[i])
            residuals[k] = float(resid[i])
    return InvariantFamily(states=fam.states, mu=mu, depth=depth, residuals=residuals)


def mu_weight_series(fam: FiniteKernelFamily, k_lo: int, k_hi: int, *,
                     tol: float = 1e-12, max_depth: int = 200,
                     anchor: ProbMeasure | None = None) -> np.ndarray:
    """Invariant weights for every time in ``[k_lo, k_hi]``, shape (K, S).

    Solves backward once at ``k_lo`` and propagates forward step by step;
    forward propagation contracts errors, so the anchor tolerance carries
    through the whole range.
    """
    if k_hi < k_lo:
        raise ValueError("need k_lo <= k_hi")
    if anchor is None:
        anchor, _, _ = solve_backward(fam, k_lo, tol, max_depth)
    out = np.empty((k_hi - k_lo + 1, len(fam.states)))
    w = anchor.weights.copy()
    out[0] = w
    keys = np.arange(k_lo, k_hi)
    pos = 1
    for i in range(0, keys.size, 8192):
        block = fam.matrices_at(keys[i : i + 8192])
        for mat in block:
            w = w @ mat
            w = w / w.sum()
            out[pos] = w
            pos += 1
    return out


# ---------------------------------------------------------------------------
# checks and fits
# ---------------------------------------------------------------------------


def check_invariance(fam: FiniteKernelFamily, family: InvariantFamily, pairs) -> InvarianceReport:
    """Max total-variation violation of ``mu_m P_{m,n} = mu_n`` over pairs."""
    worst = 0.0
    worst_pair = None
    for m, n in pairs:
        if m not in family.mu or n not in family.mu:
            raise KeyError(f"missing invariant measure for pair ({m}, {n})")
        gap = tv_distance(pushforward(fam, m, n, family.mu[m]), family.mu[n])
        if worst_pair is None or gap > worst:
            worst, worst_pair = gap, (m, n)
    return InvarianceReport(max_tv_violation=worst, worst_pair=worst_pair or ())


def v_moment(family: InvariantFamily, V):
    """Per-time moments ``int V dmu_n`` and their supremum over stored times."""
    if not family.mu:
        return {}, None
    v = _v_vector(V, family.states)
    moments = {k: float(m.weights @ v) for k, m in sorted(family.mu.items())}
    return moments, max(moments.values())


def fit_ergodic_rate(fam: FiniteKernelFamily, family: InvariantFamily, V,
                     m_range, sample_times) -> ErgodicityFit:
    """Fit the forgetting bound from exact distances to the invariant family.

    For each sampled target time ``n`` and horizon ``m``, the normalized
    distance ``tv(P_{n-m, n}(x, .), mu_n) / (1 + V(x))`` is computed exactly;
    ``alpha`` comes from a least-squares line on the log of the per-horizon
    envelope and ``M_tilde`` is inflated until the bound majorizes every
    sampled point.  A family that couples exactly reports ``alpha = 0``.
    """
    v = _v_vector(V, fam.states)
    ms = sorted(int(m) for m in m_range)
    if not ms or ms[0] < 1:
        raise ValueError("m_range must contain positive horizons")
    envelope = {m: 0.0 for m in ms}
    for n in sample_times:
        mu_n = family.weights_at(int(n))
        M = np.eye(len(fam.states))
        prev_m = 0
        for m in ms:
            for step in range(prev_m, m):
                M = fam.matrix_at(int(n) - step - 1) @ M
            prev_m = m
            d = np.abs(M - mu_n[None, :]).sum(axis=1) / (1.0 + v)
            envelope[m] = max(envelope[m], float(d.max()))
    floor = 1e-14
    pts = [(m, d) for m, d in envelope.items() if d > floor]
    if len(pts) < 2:
        return ErgodicityFit(alpha=0.0, M_tilde=1.0, fit_range=(ms[0], ms[-1]),
                             residual_norm=0.0, n_points=len(pts), degenerate=True)
    xs = np.array([m for m, _ in pts], dtype=float)
    ys = np.log([d for _, d in pts])
    slope, intercept = np.polyfit(xs, ys, 1)
    alpha = float(np.exp(min(slope, 0.0)))
    if alpha == 0.0:
        M_tilde = 1.0
    else:
        M_tilde = float(np.exp(intercept))
        M_tilde = max(M_tilde, max(d / alpha**m for m, d in pts))
    resid = float(np.sqrt(np.mean((ys - (slope * xs + intercept)) ** 2)))
    return ErgodicityFit(alpha=alpha, M_tilde=M_tilde, fit_range=(ms[0], ms[-1]),
                         residual_norm=resid, n_points=len(pts))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def family_table(family: InvariantFamily) -> list[list]:
    """Rows (k, state, mass, depth, residual) for every stored time."""
    rows = []
    for k in family.times():
        m = family.mu[k]
        for s, w in zip(family.states, m.weights):
            rows.append([k, s, float(w), family.depth.get(k), family.residuals.get(k)])
    return rows


def write_family_table(family: InvariantFamily, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "state", "mass", "depth", "residual"])
        for row in family_table(family):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
