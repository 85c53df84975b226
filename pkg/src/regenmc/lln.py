"""Law-of-large-numbers experiments: tails, variance diagnostics, couplings.

Return times count entrances strictly after the start: ``tau > 0`` always,
and the taboo product over ``n`` steps multiplies the step matrices with the
columns into the target set zeroed.  The drift tail bound
``(V(x)/R) rho^n`` is exact for starts off the small set under this
convention, so bound checks sample those sites.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .conditions import DriftSpec, _v_vector, check_drift
from .invariant import InvariantFamily, mu_weight_series
from .kernels import FiniteKernelFamily, ObservableG, from_step_matrix
from .splitting import (
    RegenerationLog,
    SplitModel,
    _inv_cdf,
    _next_state_rows,
    _start_spec,
    derive_stream,
    simulate_batch,
)

_BLOCK = 8192


# ---------------------------------------------------------------------------
# built-in plumbing model for tail-bound exercises
# ---------------------------------------------------------------------------


def staircase_model():
    """Four-state ladder with steeply growing V, for drift tail checks.

    Returns ``(family, drift)`` with ``V = (1, 2, 8, 16)``, drift constants
    ``gamma = 0.5``, ``C = 1.4``, and ``R = 7`` (so the sublevel set is
    {1, 2} and ``rho = 0.9``).
    """
    rows = [
        [0.70, 0.25, 0.05, 0.00],
        [0.50, 0.40, 0.10, 0.00],
        [0.40, 0.30, 0.20, 0.10],
        [0.30, 0.30, 0.20, 0.20],
    ]
    V = (1.0, 2.0, 8.0, 16.0)
    defaults = {"V": list(V), "gamma": 0.5, "C": 1.4, "R": 7.0}
    fam = from_step_matrix((1, 2, 3, 4), rows, drift_defaults=defaults)
    return fam, DriftSpec(V=np.array(V), gamma=0.5, C=1.4, R=7.0)


# ---------------------------------------------------------------------------
# taboo survival and the drift tail bound
# ---------------------------------------------------------------------------


def taboo_tail_exact(fam: FiniteKernelFamily, C_set, s: int, x, n_max: int) -> np.ndarray:
    """Exact survival curve of the first entrance into ``C_set`` after ``s``.

    ``survival[n]`` is the probability that the chain started at ``x`` at
    time ``s`` avoids ``C_set`` at times ``s+1 .. s+n``; ``survival[0] = 1``
    for every start by the strictly-after convention.
    """
    if fam.kind != "finite":
        raise ValueError("exact taboo products need a finite kernel family")
    idx = fam.state_index(x)
    c_idx = [fam.state_index(c) for c in C_set]
    out = np.empty(n_max + 1)
    out[0] = 1.0
    r = np.zeros(len(fam.states))
    r[idx] = 1.0
    for n in range(1, n_max + 1):
        Q = fam.matrix_at(s + n - 1).copy()
        Q[:, c_idx] = 0.0
        r = r @ Q
        out[n] = r.sum()
    return out


@dataclass(frozen=True)
class TailBoundReport:
    ok: bool
    worst_excess: float
    worst_ratio: float
    worst_site: tuple
    n_sites: int
    skipped_sites: tuple

    def to_dict(self) -> dict:
        return {"ok": bool(self.ok), "worst_excess": self.worst_excess,
                "worst_ratio": self.worst_ratio, "worst_site": list(self.worst_site),
                "n_sites": self.n_sites, "skipped_sites": list(self.skipped_sites)}


def check_drift_tail_bound(fam: FiniteKernelFamily, drift: DriftSpec, sites,
                           n_max: int, *, C_set=None) -> TailBoundReport:
    """Assert ``P_{s,x}(tau > n) <= (V(x)/R) rho^n`` at every sampled site.

    The drift inequality is re-verified over the touched window first.
    Sites inside the small set are skipped (the bound concerns excursions
    that start off the set; survival there is identically covered by the
    vacuous ``V(x)/R >= 1`` sites).
    """
    v = _v_vector(drift.V, fam.states)
    small = set(drift.small_set(fam.states)) if C_set is None else set(C_set)
    c_labels = tuple(sorted(small, key=list(fam.states).index))
    sites = [(int(s), x) for s, x in sites]
    if not sites:
        raise ValueError("no sites supplied")
    lo = min(s for s, _ in sites) + 1
    hi = max(s for s, _ in sites) + n_max
    rep = check_drift(fam, drift, (lo, hi))
    if not rep.ok:
        raise ValueError(f"drift is not verified on the touched window: {rep}")
    rho = drift.rho
    worst_excess, worst_ratio, worst_site = -np.inf, 0.0, None
    kept = 0
    skipped = []
    for s, x in sites:
        if x in small:
            skipped.append((s, x))
            continue
        kept += 1
        surv = taboo_tail_exact(fam, c_labels, s, x, n_max)
        bound = (v[fam.state_index(x)] / drift.R) * rho ** np.arange(n_max + 1)
        excess = surv - bound
        ratio = np.divide(surv, bound, out=np.zeros_like(surv), where=bound > 0)
        k = int(np.argmax(excess))
        if excess[k] > worst_excess:
            worst_excess, worst_site = float(excess[k]), (s, x, k)
        worst_ratio = max(worst_ratio, float(ratio.max()))
    if kept == 0:
        raise ValueError("every supplied site lies inside the small set")
    return TailBoundReport(ok=worst_excess <= 1e-12, worst_excess=worst_excess,
                           worst_ratio=worst_ratio, worst_site=worst_site,
                           n_sites=kept, skipped_sites=tuple(skipped))


def empirical_return_survival(model: SplitModel, C_set, s: int, x, n_max: int,
                              n_samples: int, seed: int) -> np.ndarray:
    """Monte Carlo survival of the first entrance after ``s`` into ``C_set``.

    Uses the split chain's state component, whose law matches the base chain.
    """
    rng = derive_stream(seed)
    X, _ = simulate_batch(model, x, s, n_max, n_samples, rng)
    c_idx = np.array([model.base.state_index(c) for c in C_set])
    hit = np.isin(X[1:], c_idx)
    any_hit = hit.any(axis=0)
    tau = np.where(any_hit, hit.argmax(axis=0) + 1, n_max + 1)
    return np.array([(tau > n).mean() for n in range(n_max + 1)])


# ---------------------------------------------------------------------------
# geometric tail fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailFit:
    """Fitted geometric tail ``K zeta^n`` majorizing an observed survival curve."""

    K: float
    zeta: float
    theta: float
    survival: np.ndarray
    fit_range: tuple[int, int]
    ok: bool
    reason: str | None = None
    n_samples: int | None = None


def survival_from_samples(samples) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ValueError("no samples")
    n_max = int(samples.max())
    return np.array([(samples > n).mean() for n in range(n_max + 1)])


def tail_fit(data, *, n_samples: int | None = None, floor: float | None = None) -> TailFit:
    """Fit log-survival against n by least squares and inflate the prefactor.

    ``data`` is a regeneration log (cycle lengths are the return times), an
    array of return-time samples, or an already-computed survival curve (in
    which case ``n_samples`` marks it as empirical).  Empirical fits use the
    range where the curve exceeds ``10 / n_samples``; exact curves use every
    point above ``floor`` (default 1e-14).  A non-decaying fit is reported as
    a failure, which signals a broken certificate upstream.
    """
    if isinstance(data, RegenerationLog):
        samples = data.L
        if samples.size < 50:
            raise ValueError(f"need at least 50 return-time samples, have {samples.size}")
        surv = survival_from_samples(samples)
        n_samples = int(samples.size)
    else:
        arr = np.asarray(data, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("expected a nonempty 1-d sample or survival array")
        is_curve = (abs(arr[0] - 1.0) <= 1e-12 and np.all(np.diff(arr) <= 1e-12)
                    and np.all((arr >= 0) & (arr <= 1)))
        if is_curve:
            surv = arr
        else:
            samples = arr
            if samples.size < 50:
                raise ValueError(f"need at least 50 return-time samples, have {samples.size}")
            surv = survival_from_samples(samples)
            n_samples = int(samples.size)
    if n_samples is not None:
        cutoff = 10.0 / n_samples
    else:
        cutoff = 1e-14 if floor is None else floor
    ns = np.flatnonzero(surv > cutoff)
    if ns.size < 3:
        return TailFit(K=math.nan, zeta=math.nan, theta=math.nan, survival=surv,
                       fit_range=(0, 0), ok=False, reason="too few usable tail points",
                       n_samples=n_samples)
    xs = ns.astype(float)
    ys = np.log(surv[ns])
    slope, intercept = np.polyfit(xs, ys, 1)
    if slope >= 0.0:
        return TailFit(K=math.nan, zeta=math.nan, theta=math.nan, survival=surv,
                       fit_range=(int(ns[0]), int(ns[-1])), ok=False,
                       reason="no decay range", n_samples=n_samples)
    zeta = float(np.exp(slope))
    K = float(np.exp(intercept))
    K = max(K, float((surv[ns] / zeta ** xs).max()))
    return TailFit(K=K, zeta=zeta, theta=-math.log(zeta), survival=surv,
                   fit_range=(int(ns[0]), int(ns[-1])), ok=True, n_samples=n_samples)


# ---------------------------------------------------------------------------
# WLLN diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceTable:
    """Exact covariances ``Cov(g(X_i), g(X_j))`` for an equilibrium-start chain."""

    times: tuple
    matrix: np.ndarray

    def entry(self, i: int, j: int) -> float:
        ti = self.times.index(i)
        tj = self.times.index(j)
        return float(self.matrix[ti, tj])


@dataclass(frozen=True)
class CovarianceDecayFit:
    alpha: float
    C: float
    residual_norm: float
    slope_se: float
    n_points: int
    max_lag: int = 0
    matches_ergodic: bool | None = None


def wlln_covariance_exact(fam: FiniteKernelFamily, family: InvariantFamily,
                          g: ObservableG, i_range, *, ergodic_alpha: float | None = None):
    """Exact covariance table over ``i_range`` plus an exponential decay fit.

    Covariances are computed by propagating the row ``(mu_i . g) P_{i,j}``
    forward in j.  The decay fit bounds ``|Cov| <= C alpha^(j-i)`` over lags
    whose envelope still exceeds the accuracy of the supplied invariant
    family (smaller values are solver noise, not signal).  When an
    ergodic-rate alpha is supplied, the fit reports whether the two rates
    agree within fit error.
    """
    times = sorted(int(i) for i in i_range)
    gv = g.values(fam.states)
    T = len(times)
    mat = np.zeros((T, T))
    means = {i: float(family.weights_at(i) @ gv) for i in times}
    pos = {t: k for k, t in enumerate(times)}
    for a, i in enumerate(times):
        r = family.weights_at(i) * gv
        j = i
        while j <= times[-1]:
            if j in pos:
                mat[a, pos[j]] = float(r @ gv) - means[i] * means[j]
            if j == times[-1]:
                break
            r = r @ fam.matrix_at(j)
            j += 1
    mat = np.triu(mat) + np.triu(mat, 1).T
    table = CovarianceTable(times=tuple(times), matrix=mat)

    lags = np.arange(1, T)
    env = np.array([np.abs(np.diagonal(mat, offset=k)).max() for k in lags])
    mu_accuracy = max((family.residuals.get(i, 0.0) for i in times), default=0.0)
    floor = max(1e-14, 10.0 * mu_accuracy * g.bound ** 2)
    keep = env > floor
    if keep.sum() < 2:
        fit = CovarianceDecayFit(alpha=0.0, C=float(np.abs(mat).max()), residual_norm=0.0,
                                 slope_se=0.0, n_points=int(keep.sum()),
                                 matches_ergodic=None)
        return table, fit
    xs = lags[keep].astype(float)
    ys = np.log(env[keep])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    se = float(np.sqrt((resid @ resid) / max(len(xs) - 2, 1) / ((xs - xs.mean()) ** 2).sum()))
    alpha = float(np.exp(min(slope, 0.0)))
    C = float(np.exp(intercept))
    if alpha > 0:
        C = max(C, float((env[keep] / alpha ** xs).max()))
    matches = None
    if ergodic_alpha is not None and ergodic_alpha > 0 and alpha > 0:
        matches = abs(math.log(alpha) - math.log(ergodic_alpha)) <= 3.0 * se + 0.1
    fit = CovarianceDecayFit(alpha=alpha, C=C,
                             residual_norm=float(np.sqrt(np.mean(resid ** 2))),
                             slope_se=se, n_points=int(keep.sum()),
                             max_lag=int(lags[keep].max()), matches_ergodic=matches)
    return table, fit


@dataclass(frozen=True)
class VarianceCurve:
    n_grid: tuple
    var_over_n: np.ndarray
    sup: float


def wlln_variance_curve(fam: FiniteKernelFamily, family: InvariantFamily,
                        g: ObservableG, n_grid) -> VarianceCurve:
    """Exact ``Var(S_n)/n`` for an equilibrium-start chain on a grid of n.

    Sums the covariance table incrementally: the running row
    ``q_n = sum_{i<n} (mu_i . g) P_{i,n}`` turns each new time into one
    matrix action, keeping the whole curve O(n) in matrix applications.
    """
    grid = sorted(int(n) for n in n_grid)
    if not grid:
        return VarianceCurve(n_grid=(), var_over_n=np.zeros(0), sup=0.0)
    if grid[0] < 1:
        raise ValueError("variance grid entries must be positive")
    N = grid[-1]
    gv = g.values(fam.states)
    S = len(fam.states)
    q = np.zeros(S)
    sum_mg = 0.0
    var = 0.0
    out = np.empty(len(grid))
    gi = 0
    for k in range(N):
        w = family.weights_at(k)
        mg = float(w @ gv)
        varg = float(w @ (gv * gv)) - mg * mg
        cross = float(q @ gv) - sum_mg * mg
        var += varg + 2.0 * cross
        if k + 1 == grid[gi]:
            out[gi] = var / (k + 1)
            gi += 1
            if gi == len(grid):
                break
        q = (q + w * gv) @ fam.matrix_at(k)
        sum_mg += mg
    return VarianceCurve(n_grid=tuple(grid), var_over_n=out, sup=float(out.max()))


def wlln_variance_bound(g: ObservableG, fit: CovarianceDecayFit) -> float:
    """Closed-form ceiling ``2 ||g||^2 + 2 C alpha / (1 - alpha)`` for Var(S_n)/n."""
    if fit.alpha >= 1.0:
        raise ValueError("decay fit must have alpha < 1")
    tail = 0.0 if fit.alpha == 0.0 else 2.0 * fit.C * fit.alpha / (1.0 - fit.alpha)
    return 2.0 * g.bound ** 2 + tail


# ---------------------------------------------------------------------------
# SLLN runs
# ---------------------------------------------------------------------------


@dataclass
class LLNReport:
    """Running-average gaps and regeneration diagnostics per replication."""

    n_grid: tuple
    gaps: np.ndarray            # (replications, len(n_grid))
    cycle_stats: dict           # arrays per replication
    N_curve: np.ndarray         # (replications, len(n_grid)), N(n)/n per horizon
    g_bound: float
    steps: int
    replications: int
    seed: int

    @property
    def N_over_n(self) -> np.ndarray:
        return self.N_curve[:, -1]

    @property
    def max_abs_final_gap(self) -> float:
        return float(np.abs(self.gaps[:, -1]).max())

    def gaps_table(self) -> list[list]:
        rows = []
        for r in range(self.gaps.shape[0]):
            for j, n in enumerate(self.n_grid):
                rows.append([r, n, float(self.gaps[r, j]), float(self.N_curve[r, j])])
        return rows

    def cycles_table(self) -> list[list]:
        cs = self.cycle_stats
        rows = []
        for r in range(self.gaps.shape[0]):
            rows.append([r, int(cs["n_cycles"][r]), float(cs["L_mean"][r]),
                         float(cs["L_var"][r]), float(cs["D_mean"][r]),
                         float(cs["D_var"][r]), float(self.N_over_n[r])])
        return rows


def default_n_grid(steps: int) -> tuple:
    grid = sorted({10 ** e for e in range(1, 12) if 10 ** e <= steps} | {steps})
    return tuple(grid)


def _slln_one(model, start, steps, seed, rep, mu_g, gv, grid):
    rng = derive_stream(seed, rep)
    X, D = simulate_batch(model, start, 0, steps, 1, [rng])
    idx = X[:, 0]
    lev = D[:, 0]
    gpath = gv[idx]
    csg = np.cumsum(gpath[:-1])
    csmu = np.cumsum(mu_g[:steps])
    garr = np.array([(csg[n - 1] - csmu[n - 1]) / n for n in grid])
    log = RegenerationLog.from_path(lev, model._in_c[idx])
    L = log.L.astype(float)
    h = gpath - mu_g
    cs = np.concatenate([[0.0], np.cumsum(h)])
    Dc = cs[log.tau[1:] + 1] - cs[log.tau[:-1] + 1]
    stats = {
        "n_cycles": len(L),
        "L_mean": float(L.mean()) if len(L) else math.nan,
        "L_var": float(L.var(ddof=1)) if len(L) > 1 else math.nan,
        "D_mean": float(Dc.mean()) if len(Dc) else math.nan,
        "D_var": float(Dc.var(ddof=1)) if len(Dc) > 1 else math.nan,
    }
    n_curve = np.array([(log.N_of_n(n) if len(log.tau) and n >= log.tau[0] else 0) / n
                        for n in grid])
    return garr, stats, n_curve, log


def slln_run(model: SplitModel, family: InvariantFamily, g: ObservableG, start,
             steps: int, seed: int, replications: int, *, n_grid=None,
             mu_of_g=None, workers: int = 1) -> LLNReport:
    """Empirical running averages against the invariant-mean running averages.

    ``gap(n) = (1/n) sum_{k<n} g(X_k) - (1/n) sum_{k<n} mu_k(g)`` is recorded
    on the horizon grid for every replication, together with cycle-length
    and centered-cycle-sum statistics.  Replications use independent streams
    keyed by (seed, replication), so results do not depend on ``workers``.
    """
    if steps < 1:
        raise ValueError("steps must be positive (the horizon grid is empty otherwise)")
    fam = model.base
    if fam.kind != "finite":
        raise ValueError("slln_run needs a finite base; supply mu_of_g for samplers")
    grid = tuple(sorted(int(n) for n in (n_grid or default_n_grid(steps))))
    if not grid or grid[0] < 1 or grid[-1] > steps:
        raise ValueError("n_grid must contain horizons in [1, steps]")
    gv = g.values(fam.states)
    if mu_of_g is not None:
        mu_g = np.asarray(mu_of_g, dtype=float)
        if mu_g.shape[0] < steps:
            raise ValueError("mu_of_g must cover every step")
    else:
        anchor = family.mu.get(0)
        W = mu_weight_series(fam, 0, steps, anchor=anchor)
        mu_g = W @ gv
    gaps = np.empty((replications, len(grid)))
    stats = {k: np.empty(replications) for k in
             ("n_cycles", "L_mean", "L_var", "D_mean", "D_var")}
    n_curve = np.empty((replications, len(grid)))

    def run(rep):
        return rep, _slln_one(model, start, steps, seed, rep, mu_g, gv, grid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(replications)))
    else:
        results = [run(r) for r in range(replications)]
    for rep, (garr, st, nn, _) in results:
        gaps[rep] = garr
        for k in stats:
            stats[k][rep] = st[k]
        n_curve[rep] = nn
    if np.any(np.abs(gaps) > 2.0 * g.bound + 1e-9):
        raise AssertionError("gap exceeded the a-priori bound 2 ||g||")
    return LLNReport(n_grid=grid, gaps=gaps, cycle_stats=stats, N_curve=n_curve,
                     g_bound=g.bound, steps=steps, replications=replications, seed=seed)


def cesaro_invariant_mean(family: InvariantFamily, g: ObservableG, n_grid) -> np.ndarray:
    """Partial means ``(1/n) sum_{k<n} mu_k(g)``; reported as data only."""
    grid = sorted(int(n) for n in n_grid)
    if not grid:
        return np.zeros(0)
    gv = g.values(family.states) if isinstance(g, ObservableG) else np.asarray(g, float)
    N = grid[-1]
    means = np.empty(N)
    for k in range(N):
        means[k] = float(family.weights_at(k) @ gv)
    cs = np.cumsum(means)
    return np.array([cs[n - 1] / n for n in grid])


# ---------------------------------------------------------------------------
# coalescing coupling
# ---------------------------------------------------------------------------


@dataclass
class CouplingReport:
    """Coupling times of chains sharing randomness once their states meet."""

    T: np.ndarray
    coalesced: np.ndarray
    steps: int
    replications: int
    seed: int
    equality_verified: bool

    @property
    def mean_T(self) -> float:
        return float(self.T[self.coalesced].mean()) if self.coalesced.any() else math.nan

    @property
    def all_coalesced(self) -> bool:
        return bool(self.coalesced.all())

    def survival(self) -> np.ndarray:
        horizon = int(self.T[self.coalesced].max()) if self.coalesced.any() else 0
        return np.array([np.mean(np.where(self.coalesced, self.T, np.inf) > n)
                         for n in range(horizon + 1)])

    def table(self) -> list[list]:
        return [[r, int(self.T[r]) if self.coalesced[r] else "", bool(self.coalesced[r])]
                for r in range(self.replications)]


def coalescing_couple(model: SplitModel, start_a, start_b, steps: int, seed: int,
                      *, replications: int = 1, workers: int = 1) -> CouplingReport:
    """Run paired split chains that merge at their first shared regeneration.

    Each pair consumes four uniforms per position (state and level draws for
    both chains).  When both levels ring, both chains draw the same next
    state from ``nu``; once the split states coincide the pair shares all
    subsequent draws, so equality is permanent.  Pairs that never meet
    within ``steps`` are reported, not fatal.
    """
    if model.base.kind != "finite":
        raise ValueError("the coupling engine needs a finite base")

    def run_chunk(rep_ids):
        return _couple_chunk(model, start_a, start_b, steps, seed, rep_ids)

    chunks = np.array_split(np.arange(replications), max(1, min(workers, replications)))
    chunks = [c for c in chunks if c.size]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    T = np.concatenate([p[0] for p in parts])
    verified = all(p[1] for p in parts)
    coalesced = T >= 0
    return CouplingReport(T=T, coalesced=coalesced, steps=steps,
                          replications=replications, seed=seed,
                          equality_verified=verified)


def _couple_chunk(model: SplitModel, start_a, start_b, steps, seed, rep_ids,
                  verify_window: int = 16):
    S = len(model.base.states)
    beta = model.cert.beta
    in_c = model._in_c
    R = rep_ids.size
    rngs = [derive_stream(seed, int(r)) for r in rep_ids]

    def draw(count):
        out = np.empty((count, R, 4))
        for j, rng in enumerate(rngs):
            out[:, j, :] = rng.random((count, 4))
        return out

    ia, ca = _start_spec(model, start_a)
    ib, cb = _start_spec(model, start_b)
    u = draw(1)[0]
    xa = np.full(R, ia, dtype=np.int64) if ia is not None else _inv_cdf(
        np.broadcast_to(ca, (R, S)), u[:, 0])
    xb = np.full(R, ib, dtype=np.int64) if ib is not None else _inv_cdf(
        np.broadcast_to(cb, (R, S)), u[:, 2])
    equal = xa == xb
    da = ((u[:, 1] <= beta) & in_c[xa]).astype(np.uint8)
    db = np.where(equal, da, ((u[:, 3] <= beta) & in_c[xb]).astype(np.uint8)).astype(np.uint8)
    T = np.where(equal, 0, -1)
    equality_ok = True

    t = 1
    while t <= steps:
        merged = T >= 0
        if merged.all() and t > int(T.max()) + verify_window:
            break
        nb = min(_BLOCK, steps - t + 1)
        cum = np.cumsum(_next_state_rows(model, np.arange(t - 1, t - 1 + nb)), axis=-1)
        U = draw(nb)
        for b in range(nb):
            merged = T >= 0
            ux_a, ub_a, ux_b, ub_b = U[b, :, 0], U[b, :, 1], U[b, :, 2], U[b, :, 3]
            # both levels ringing means both next states come from nu, which is
            # exactly the level-1 row; sharing A's draw realizes the common sample
            bell_both = (~merged) & (da == 1) & (db == 1)
            xa_new = _inv_cdf(cum[b][xa + S * da], ux_a)
            xb_own = _inv_cdf(cum[b][xb + S * db], ux_b)
            xb_shared = _inv_cdf(cum[b][xb + S * db], ux_a)
            xb_new = np.where(merged, xb_shared, np.where(bell_both, xa_new, xb_own))
            equal = xa_new == xb_new
            da_new = ((ub_a <= beta) & in_c[xa_new]).astype(np.uint8)
            db_own = ((ub_b <= beta) & in_c[xb_new]).astype(np.uint8)
            db_new = np.where(equal, da_new, db_own).astype(np.uint8)
            if merged.any() and not (np.all(xa_new[merged] == xb_new[merged])
                                     and np.all(da_new[merged] == db_new[merged])):
                equality_ok = False
            xa, xb, da, db = xa_new, xb_new, da_new, db_new
            newly = (~merged) & (xa == xb) & (da == db)
            T = np.where(newly, t, T)
            t += 1
            if t > steps:
                break
    return T, equality_ok


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
