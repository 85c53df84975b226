"""Split-chain construction, simulation, and regeneration bookkeeping.

The chain is enlarged to ``state x {0, 1}``.  On the small set the level bit
rings with probability ``beta`` and forces the next state to be drawn from
the minorizing measure ``nu``, independently of the past; off the small set
the level stays 0 and the chain moves by its original kernel.  Level-0 moves
from inside the small set use the residual kernel ``(P - beta nu)/(1-beta)``.

Simulation consumes one uniform pair ``(U_x, U_bell)`` per path position in a
fixed order: ``U_x`` drives the next-state draw by inverse CDF (or the start
draw at position 0) and ``U_bell`` decides the level.  This layout makes
trajectories bit-reproducible and lets couplings share the randomness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .conditions import DoeblinCertificate, DriftSpec, _v_vector, verify_doeblin
from .kernels import KernelFamily, ObservableG, ProbMeasure, compose_interval

_BLOCK = 8192
_REJECTION_CAP = 10**6


def derive_stream(seed: int, *unit) -> np.random.Generator:
    """Independent generator for a work unit, keyed by (seed, unit id)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(unit)))


# ---------------------------------------------------------------------------
# split states and measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitState:
    """State together with its level bit."""

    x: object
    level: int

    def __post_init__(self):
        if self.level not in (0, 1):
            raise ValueError("level must be 0 or 1")


@dataclass(frozen=True)
class SplitMeasure:
    """Measure on ``state x {0, 1}`` over a finite state list.

    ``mass[i, level]`` is the mass at (states[i], level).
    """

    states: tuple
    mass: np.ndarray

    def __post_init__(self):
        m = np.array(self.mass, dtype=float, copy=True)
        if m.shape != (len(self.states), 2):
            raise ValueError("mass must have shape (n_states, 2)")
        m.setflags(write=False)
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "mass", m)

    def total(self) -> float:
        return float(self.mass.sum())

    def marginal_x(self) -> ProbMeasure:
        w = self.mass.sum(axis=1)
        return ProbMeasure(self.states, w / w.sum())

    def level_mass(self, level: int) -> np.ndarray:
        return self.mass[:, level]

    def as_vector(self) -> np.ndarray:
        """Flattened masses: all level-0 entries, then all level-1 entries."""
        return np.concatenate([self.mass[:, 0], self.mass[:, 1]])


def split_measure(lam: ProbMeasure, cert: DoeblinCertificate, V) -> SplitMeasure:
    """Split a measure across the two levels.

    Small-set mass drops to level 1 with probability ``beta``; everything
    else stays at level 0.  The level marginal recovers ``lam`` exactly and
    no level-1 mass sits outside the small set.
    """
    v = _v_vector(V, lam.states)
    in_c = v <= cert.R
    mass = np.zeros((len(lam.states), 2))
    mass[:, 0] = np.where(in_c, (1.0 - cert.beta) * lam.weights, lam.weights)
    mass[:, 1] = np.where(in_c, cert.beta * lam.weights, 0.0)
    return SplitMeasure(lam.states, mass)


# ---------------------------------------------------------------------------
# split model
# ---------------------------------------------------------------------------


class SplitModel:
    """A base kernel family together with its verified minorization.

    Finite bases are verified at construction (unless the certificate is
    flagged trusted).  Sampler bases cannot be verified and must supply a
    ``nu_sampler`` plus either a ``residual_sampler`` or densities for
    rejection sampling of the residual kernel.
    """

    def __init__(self, base: KernelFamily, cert: DoeblinCertificate, drift: DriftSpec,
                 *, nu_sampler=None, residual_sampler=None, nu_density=None):
        self.base = base
        self.cert = cert
        self.drift = drift
        self.nu_sampler = nu_sampler
        self.residual_sampler = residual_sampler
        self.nu_density = nu_density
        if base.kind == "finite":
            if cert.nu is None or tuple(cert.nu.states) != base.states:
                raise ValueError("certificate measure is over a different state list")
            expected = drift.small_set(base.states)
            if set(expected) != set(cert.small_set):
                raise ValueError(
                    "certificate small set disagrees with the drift sublevel set"
                )
            if not cert.trusted:
                report = verify_doeblin(base, cert)
                if not report.ok:
                    raise ValueError(
                        f"minorization fails: residual {report.worst_slack:.3e} "
                        f"at {report.worst_site}"
                    )
            self._in_c = np.array([s in set(cert.small_set) for s in base.states])
            self._nu = cert.nu.weights
        else:
            if not cert.trusted:
                raise ValueError("sampler kernels need a trusted certificate")
            if not callable(drift.V):
                raise ValueError("sampler models need a callable V")
            if nu_sampler is None:
                raise ValueError("sampler models need a nu_sampler")
            if residual_sampler is None and (base.density is None or nu_density is None):
                raise ValueError(
                    "sampler models need a residual_sampler, or densities for "
                    "rejection sampling of the residual kernel"
                )

    @property
    def states(self):
        return self.base.states

    def in_small_set(self, x) -> bool:
        if self.base.kind == "finite":
            return bool(self._in_c[self.base.state_index(x)])
        return float(self.drift.V(x)) <= self.cert.R


# ---------------------------------------------------------------------------
# split kernel evaluation (finite)
# ---------------------------------------------------------------------------


def _next_state_rows(model: SplitModel, keys) -> np.ndarray:
    """Next-state distributions for every split state, shape (K, 2S, S).

    Row ``x + S*level`` holds the law of the next state out of (x, level):
    the base row off the small set, the residual row on it, and ``nu`` from
    level 1.
    """
    base = model.base
    S = len(base.states)
    P = base.matrices_at(keys)
    beta, nu = model.cert.beta, model._nu
    rows0 = np.array(P, copy=True)
    in_c = model._in_c
    if beta < 1.0:
        resid = (P[:, in_c, :] - beta * nu[None, None, :]) / (1.0 - beta)
        if float(resid.min()) < -1e-12:
            raise ValueError("negative residual kernel: certificate does not minorize here")
        resid = np.clip(resid, 0.0, None)
        resid /= resid.sum(axis=-1, keepdims=True)
        rows0[:, in_c, :] = resid
    else:
        rows0[:, in_c, :] = nu  # level 0 on the set is unreachable when beta = 1
    rows1 = np.broadcast_to(nu, (P.shape[0], S, S))
    return np.concatenate([rows0, rows1], axis=1)


def eval_split_kernel(model: SplitModel, n: int, s: SplitState) -> SplitMeasure:
    """One-step split kernel out of split state ``s`` at departure time ``n``."""
    if model.base.kind != "finite":
        raise ValueError("closed-form split kernels need a finite base")
    i = model.base.state_index(s.x)
    if s.level == 1 and not model._in_c[i]:
        raise ValueError(f"level 1 is unreachable outside the small set ({s.x!r})")
    S = len(model.base.states)
    rows = _next_state_rows(model, [n])[0]
    row = rows[i + S * s.level]
    return split_measure(ProbMeasure(model.base.states, row), model.cert,
                         _v_vector(model.drift.V, model.base.states))


# ---------------------------------------------------------------------------
# trajectories and regeneration logs
# ---------------------------------------------------------------------------


@dataclass
class SplitTrajectory:
    """Realized split-chain path, stored as parallel arrays.

    Position ``i`` corresponds to absolute time ``start_time + i``.
    ``uniforms_consumed`` counts the draws made by the engine itself; user
    samplers may consume more internally.
    """

    start_time: int
    states: np.ndarray
    levels: np.ndarray
    seed: object
    uniforms_consumed: int
    state_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    def split_state(self, i: int) -> SplitState:
        return SplitState(self.states[i], int(self.levels[i]))

    def observable_values(self, g: ObservableG, states=None) -> np.ndarray:
        """g along the path; uses the index fast path when available."""
        if self.state_indices is not None and states is not None:
            return g.values(states)[self.state_indices]
        return np.array([g(x) for x in self.states])


@dataclass
class RegenerationLog:
    """Regeneration times, small-set visit times, and cycle bookkeeping.

    All times are path offsets (position minus start), so ``tau[0]`` follows
    the ``min{n >= 0 : level_n = 1}`` convention and may be 0.
    """

    tau: np.ndarray
    sigma: np.ndarray

    @property
    def L(self) -> np.ndarray:
        """Cycle lengths between successive regenerations."""
        return np.diff(self.tau)

    def cycle_count(self) -> int:
        return max(len(self.tau) - 1, 0)

    def N_of_n(self, n: int) -> int:
        """Number of completed cycles by path offset ``n`` (requires n >= tau_0)."""
        if len(self.tau) == 0 or n < self.tau[0]:
            raise ValueError(f"offset {n} precedes the first regeneration")
        return int(np.searchsorted(self.tau, n, side="right") - 1)

    def r_of_n(self, n: int) -> int:
        """Offset into the running cycle: ``n - tau_{N(n)}``."""
        return int(n - self.tau[self.N_of_n(n)])

    @classmethod
    def from_path(cls, levels: np.ndarray, in_small: np.ndarray) -> "RegenerationLog":
        return cls(tau=np.flatnonzero(levels == 1), sigma=np.flatnonzero(in_small))


def cycle_sums(log: RegenerationLog, traj: SplitTrajectory, g: ObservableG,
               states=None) -> np.ndarray:
    """Per-cycle sums ``sum_{j = tau_l + 1}^{tau_{l+1}} g(X_j)``."""
    gv = traj.observable_values(g, states)
    cs = np.concatenate([[0.0], np.cumsum(gv)])
    tau = log.tau
    return cs[tau[1:] + 1] - cs[tau[:-1] + 1]


# ---------------------------------------------------------------------------
# finite-state batch engine
# ---------------------------------------------------------------------------


def _start_spec(model: SplitModel, start):
    """Normalize a start (label, measure, or weight vector) for the engine."""
    states = model.base.states
    if isinstance(start, ProbMeasure):
        if tuple(start.states) != states:
            raise ValueError("start measure is over a different state list")
        return None, np.cumsum(start.weights)
    if isinstance(start, (list, tuple, np.ndarray)) and len(np.shape(start)) == 1 \
            and len(start) == len(states) and not isinstance(start, str):
        w = np.asarray(start, dtype=float)
        return None, np.cumsum(w / w.sum())
    idx = model.base.state_index(start)
    v = _v_vector(model.drift.V, states)
    if not np.isfinite(v[idx]):
        raise ValueError(f"start {start!r} has infinite V")
    return idx, None


def _inv_cdf(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cum_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def _draw_pairs(rng_or_rngs, n_chains: int, count: int) -> np.ndarray:
    """Uniform pairs, shape (count, n_chains, 2), one stream or one per chain."""
    if isinstance(rng_or_rngs, np.random.Generator):
        return rng_or_rngs.random((count, n_chains, 2))
    out = np.empty((count, n_chains, 2))
    for r, rng in enumerate(rng_or_rngs):
        out[:, r, :] = rng.random((count, 2))
    return out


def simulate_batch(model: SplitModel, start, s: int, steps: int, n_chains: int,
                   rng_or_rngs, *, bell_beta: float | None = None):
    """Simulate ``n_chains`` split chains for ``steps`` transitions.

    Returns ``(X, D)`` with shapes ``(steps + 1, n_chains)``: state indices
    and level bits per path position.  ``bell_beta`` overrides the level-draw
    probability only (a fault-injection hook for consistency tests).
    """
    if model.base.kind != "finite":
        raise ValueError("the batch engine needs a finite base")
    states = model.base.states
    S = len(states)
    beta = model.cert.beta if bell_beta is None else float(bell_beta)
    in_c = model._in_c
    start_idx, start_cum = _start_spec(model, start)

    X = np.empty((steps + 1, n_chains), dtype=np.int64)
    D = np.empty((steps + 1, n_chains), dtype=np.uint8)

    u0 = _draw_pairs(rng_or_rngs, n_chains, 1)[0]
    if start_idx is not None:
        x = np.full(n_chains, start_idx, dtype=np.int64)
    else:
        x = _inv_cdf(np.broadcast_to(start_cum, (n_chains, S)), u0[:, 0])
    d = ((u0[:, 1] <= beta) & in_c[x]).astype(np.uint8)
    X[0], D[0] = x, d

    t = 1
    while t <= steps:
        nb = min(_BLOCK, steps - t + 1)
        keys = np.arange(s + t - 1, s + t - 1 + nb)
        cum = np.cumsum(_next_state_rows(model, keys), axis=-1)
        U = _draw_pairs(rng_or_rngs, n_chains, nb)
        for b in range(nb):
            rows = cum[b][x + S * d]
            x = _inv_cdf(rows, U[b, :, 0])
            d = ((U[b, :, 1] <= beta) & in_c[x]).astype(np.uint8)
            X[t], D[t] = x, d
            t += 1
    return X, D


def simulate_split_chain(model: SplitModel, start, s: int, steps: int, seed: int,
                         *, bell_beta: float | None = None):
    """Simulate one split chain; returns (SplitTrajectory, RegenerationLog)."""
    if model.base.kind == "finite":
        rng = derive_stream(seed)
        X, D = simulate_batch(model, start, s, steps, 1, rng, bell_beta=bell_beta)
        idx = X[:, 0]
        levels = D[:, 0]
        traj = SplitTrajectory(
            start_time=s,
            states=np.asarray(model.base.states)[idx],
            levels=levels,
            seed=seed,
            uniforms_consumed=2 * (steps + 1),
            state_indices=idx,
        )
        log = RegenerationLog.from_path(levels, model._in_c[idx])
        return traj, log
    return _simulate_sampler(model, start, s, steps, seed, bell_beta=bell_beta)


def _residual_draw(model: SplitModel, n: int, x, rng, counter) -> object:
    if model.residual_sampler is not None:
        return model.residual_sampler(n, x, rng)
    beta = model.cert.beta
    for _ in range(_REJECTION_CAP):
        y = model.base.step(n, x, rng)
        u = rng.random()
        counter[0] += 1
        p = float(model.base.density(n, x, y))
        q = float(model.nu_density(y))
        if u * p < p - beta * q:
            return y
    raise RuntimeError("residual rejection sampling exceeded the retry cap")


def _simulate_sampler(model: SplitModel, start, s: int, steps: int, seed: int,
                      *, bell_beta: float | None = None):
    rng = derive_stream(seed)
    beta = model.cert.beta if bell_beta is None else float(bell_beta)
    V = model.drift.V
    x = start(rng) if callable(start) else start
    if not callable(start) and not np.isfinite(float(V(x))):
        raise ValueError("start has infinite V")
    consumed = [0]

    def bell(y):
        consumed[0] += 1
        return 1 if (float(V(y)) <= model.cert.R and rng.random() <= beta) else 0

    path = [x]
    levels = [bell(x)]
    in_small = [float(V(x)) <= model.cert.R]
    for t in range(1, steps + 1):
        n = s + t - 1
        model.base.check_key(n)
        if levels[-1] == 1:
            x = model.nu_sampler(rng)
        elif in_small[-1]:
            x = _residual_draw(model, n, path[-1], rng, consumed)
        else:
            x = model.base.step(n, path[-1], rng)
        path.append(x)
        in_small.append(float(V(x)) <= model.cert.R)
        levels.append(bell(x))
    levels = np.asarray(levels, dtype=np.uint8)
    traj = SplitTrajectory(
        start_time=s,
        states=np.asarray(path, dtype=object if model.base.states else float),
        levels=levels,
        seed=seed,
        uniforms_consumed=consumed[0],
    )
    log = RegenerationLog.from_path(levels, np.asarray(in_small))
    return traj, log


# ---------------------------------------------------------------------------
# distributional checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalReport:
    """Per-horizon gaps between split-chain marginals and exact marginals."""

    gaps: np.ndarray
    scale: float
    n_samples: int

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max()) if self.gaps.size else 0.0

    def to_dict(self) -> dict:
        return {"gaps": self.gaps.tolist(), "scale": self.scale,
                "n_samples": self.n_samples, "max_gap": self.max_gap}


def marginal_consistency(model: SplitModel, start, s: int, horizon: int,
                         n_samples: int, seed: int,
                         *, bell_beta: float | None = None) -> MarginalReport:
    """Compare empirical split-chain state marginals to exact base marginals.

    For each ``t = 1..horizon`` the total variation between the empirical
    distribution of the state component and the exact pushforward of the
    start is reported; gap magnitudes scale as ``sqrt(2/n_samples)``.
    """
    if model.base.kind != "finite":
        raise ValueError("exact marginals need a finite base")
    if horizon == 0:
        return MarginalReport(gaps=np.zeros(0), scale=math.sqrt(2.0 / n_samples),
                              n_samples=n_samples)
    rng = derive_stream(seed)
    X, _ = simulate_batch(model, start, s, horizon, n_samples, rng, bell_beta=bell_beta)
    S = len(model.base.states)
    start_idx, start_cum = _start_spec(model, start)
    if start_idx is not None:
        w0 = np.zeros(S)
        w0[start_idx] = 1.0
    else:
        w0 = np.diff(np.concatenate([[0.0], start_cum]))
    gaps = np.empty(horizon)
    for t in range(1, horizon + 1):
        emp = np.bincount(X[t], minlength=S) / n_samples
        exact = w0 @ compose_interval(model.base, s, s + t)
        gaps[t - 1] = np.abs(emp - exact).sum()
    return MarginalReport(gaps=gaps, scale=math.sqrt(2.0 / n_samples), n_samples=n_samples)


@dataclass(frozen=True)
class CycleIndependenceReport:
    corr: float
    n_cycles: int
    threshold: float
    flagged: bool
    p_value: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"corr": self.corr, "n_cycles": self.n_cycles,
                "threshold": self.threshold, "flagged": bool(self.flagged),
                "p_value": self.p_value, "degenerate": bool(self.degenerate)}


def cycle_independence_check(log: RegenerationLog, traj: SplitTrajectory,
                             g: ObservableG, states=None) -> CycleIndependenceReport:
    """Lag-1 correlation of consecutive cycle sums of ``g``.

    Cycle sums are detrended against cycle lengths first, so a constant
    observable (whose sums are exactly proportional to lengths) degenerates
    to zero correlation rather than a spurious one.
    """
    m = log.cycle_count()
    if m < 100:
        raise ValueError(f"need at least 100 complete cycles, have {m}")
    d0 = cycle_sums(log, traj, g, states)
    lengths = log.L.astype(float)
    A = np.column_stack([np.ones(m), lengths])
    coef, *_ = np.linalg.lstsq(A, d0, rcond=None)
    resid = d0 - A @ coef
    scale = float(np.abs(d0).max()) or 1.0
    if float(resid.std()) <= 1e-12 * scale:
        return CycleIndependenceReport(corr=0.0, n_cycles=m, threshold=3.0 / math.sqrt(m),
                                       flagged=False, p_value=1.0, degenerate=True)
    a, b = resid[:-1], resid[1:]
    corr = float(np.corrcoef(a, b)[0, 1])
    threshold = 3.0 / math.sqrt(m)
    p = math.erfc(abs(corr) * math.sqrt(m) / math.sqrt(2.0))
    return CycleIndependenceReport(corr=corr, n_cycles=m, threshold=threshold,
                                   flagged=abs(corr) > threshold, p_value=p)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_trajectory(traj: SplitTrajectory, path) -> None:
    """Rows (t, state, level, is_regeneration) with absolute times."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "state", "level", "is_regeneration"])
        for i in range(len(traj)):
            lvl = int(traj.levels[i])
            writer.writerow([traj.start_time + i, traj.states[i], lvl, lvl])


def write_regeneration_log(log: RegenerationLog, path) -> None:
    """Rows (k, tau_k, L_k); the last cycle length is left blank."""
    L = log.L
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "tau_k", "L_k"])
        for k, tau_k in enumerate(log.tau):
            writer.writerow([k, int(tau_k), int(L[k]) if k < len(L) else ""])
