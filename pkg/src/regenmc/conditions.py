"""Certificate checks for drift, minorization, and contraction conditions.

Windows are inclusive ``(lo, hi)`` ranges of *arrival* times: checking time
``n`` inspects the step from ``n-1`` into ``n``.  Passing ``window=None``
requests analytic certification over all integers, available for waveform
kernels whose entries admit closed-form bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import FiniteKernelFamily, KernelFamily, ProbMeasure

RESIDUAL_TOL = 1e-12


def _v_vector(V, states) -> np.ndarray:
    """Tabulate a Lyapunov function over a finite state list."""
    if callable(V):
        return np.array([float(V(x)) for x in states])
    V = np.asarray(V, dtype=float)
    if V.ndim == 0:
        return np.full(len(states), float(V))
    if V.shape != (len(states),):
        raise ValueError("V does not match the state list")
    return V.copy()


def window_times(window) -> np.ndarray:
    """Expand an inclusive (lo, hi) pair or iterable into an array of times."""
    if window is None:
        raise ValueError("this operation needs a finite window")
    if isinstance(window, tuple) and len(window) == 2 and all(
        isinstance(v, (int, np.integer)) for v in window
    ):
        lo, hi = window
        if hi < lo:
            raise ValueError(f"empty window {window}")
        return np.arange(lo, hi + 1)
    times = np.asarray(list(window), dtype=int)
    if times.size == 0:
        raise ValueError("empty window")
    return times


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftSpec:
    """Verified drift constants for a Lyapunov function V.

    Derived quantities follow the standing choice ``R > C/(1-gamma)^2``,
    which makes ``rho = gamma + C'/R < 1`` with ``C' = C/(1-gamma)``.
    """

    V: object
    gamma: float
    C: float
    R: float
    allow_infinite_v: bool = False

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.C <= 0.0:
            raise ValueError("C must be positive")
        if self.R <= self.C / (1.0 - self.gamma) ** 2:
            raise ValueError("R must exceed C/(1-gamma)^2 strictly")

    @property
    def C_prime(self) -> float:
        return self.C / (1.0 - self.gamma)

    @property
    def rho(self) -> float:
        return self.gamma + self.C_prime / self.R

    def v_values(self, states) -> np.ndarray:
        v = _v_vector(self.V, states)
        if np.any(v < 0):
            raise ValueError("V must be nonnegative")
        if not np.any(np.isfinite(v)):
            raise ValueError("V must be finite somewhere")
        if np.any(~np.isfinite(v)) and not self.allow_infinite_v:
            raise ValueError(
                "V takes non-finite values; set allow_infinite_v to accept them"
            )
        return v

    def v_at(self, x, states=None) -> float:
        """Evaluate V at a single state label."""
        if callable(self.V):
            return float(self.V(x))
        arr = np.asarray(self.V, dtype=float)
        if arr.ndim == 0:
            return float(arr)
        if states is None:
            raise ValueError("vector V needs the state list to evaluate a label")
        return float(arr[tuple(states).index(x)])

    def small_set(self, states) -> tuple:
        """Labels of the sublevel set {V <= R}."""
        v = self.v_values(states)
        labels = tuple(s for s, ok in zip(states, v <= self.R) if ok)
        if not labels:
            raise ValueError("the sublevel set {V <= R} is empty")
        return labels

    @classmethod
    def from_model(cls, fam: KernelFamily, **overrides) -> "DriftSpec":
        """Build from a model's attached drift defaults."""
        if not getattr(fam, "drift_defaults", None):
            raise ValueError("model carries no drift defaults")
        params = dict(fam.drift_defaults)
        params.update(overrides)
        return cls(V=params["V"], gamma=params["gamma"], C=params["C"], R=params["R"])


@dataclass(frozen=True)
class DoeblinCertificate:
    """Uniform minorization ``P(n-1, x, n, .) >= beta * nu`` on a small set.

    ``nu`` may be None only for trusted certificates on sampler-backed
    kernels, where the measure is realized by a user-supplied sampler.
    """

    beta: float
    nu: ProbMeasure | None
    R: float
    small_set: tuple
    window: tuple[int, int] | None = None
    trusted: bool = False

    def __post_init__(self):
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must lie in (0, 1]")
        if self.nu is None and not self.trusted:
            raise ValueError("a certificate without an explicit nu must be trusted")
        object.__setattr__(self, "small_set", tuple(self.small_set))


@dataclass(frozen=True)
class ContractionCertificate:
    """n0-step total-variation contraction over the pair set {V(x)+V(y) <= R}."""

    n0: int
    delta: float
    R: float
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be a positive integer")
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must lie in (0, 1]")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftReport:
    ok: bool
    worst_slack: float
    worst_site: tuple
    mode: str = "exact"
    radius: float = 0.0

    def to_dict(self) -> dict:
        return {
            "ok": bool(self.ok),
            "worst_slack": self.worst_slack,
            "worst_site": list(self.worst_site),
            "mode": self.mode,
            "radius": self.radius,
        }


@dataclass(frozen=True)
class DoeblinReport:
    ok: bool
    worst_slack: float
    worst_site: tuple

    def to_dict(self) -> dict:
        return {
            "ok": bool(self.ok),
            "worst_slack": self.worst_slack,
            "worst_site": list(self.worst_site),
        }


@dataclass(frozen=True)
class PairBoundReport:
    max_tv: float
    implied_delta: float
    worst_site: tuple

    def to_dict(self) -> dict:
        return {
            "max_tv": self.max_tv,
            "implied_delta": self.implied_delta,
            "worst_site": list(self.worst_site),
        }


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------


def check_drift(fam: KernelFamily, spec: DriftSpec, window, *,
                probe_states=None, n_samples: int = 10_000, rng=None) -> DriftReport:
    """Check ``sum_y P(n-1, x, n, y) V(y) <= gamma V(x) + C`` over a window.

    ``worst_slack`` is the largest value of (lhs - rhs); the check passes
    when it does not exceed the residual tolerance.  Sampler families are
    checked by Monte Carlo at the supplied probe states, with a 3-sigma
    confidence radius added to the estimate.
    """
    if fam.kind == "sampler":
        return _check_drift_sampler(fam, spec, window, probe_states, n_samples, rng)
    v = spec.v_values(fam.states)
    rhs = spec.gamma * v + spec.C
    finite = np.isfinite(v)
    if window is None:
        lhs, site_label = _drift_lhs_analytic(fam, v)
        times = None
    else:
        times = window_times(window)
        stacks = fam.matrices_at(times - 1)
        with np.errstate(invalid="ignore"):
            lhs = stacks @ np.where(finite, v, np.inf)  # (K, S)
        lhs = np.where(np.isnan(lhs), np.inf, lhs)
        site_label = None
    slack = lhs - rhs
    slack = slack[..., finite] if slack.ndim == 2 else slack[finite]
    labels = tuple(s for s, f in zip(fam.states, finite) if f)
    if slack.ndim == 2:
        flat = int(np.argmax(slack))
        k, i = divmod(flat, slack.shape[1])
        worst_site = (int(times[k]), labels[i])
    else:
        i = int(np.argmax(slack))
        worst_site = ("analytic", labels[i])
    worst = float(slack.max())
    return DriftReport(ok=worst <= RESIDUAL_TOL, worst_slack=worst, worst_site=worst_site)


def _drift_lhs_analytic(fam: FiniteKernelFamily, v: np.ndarray):
    coeffs = fam.wave_coefficients()
    if coeffs is None:
        raise ValueError("analytic drift bounds need a waveform kernel")
    if np.any(~np.isfinite(v)):
        raise ValueError("analytic drift bounds need a finite V")
    off, asin, acos = coeffs
    base = off @ v
    osc = np.hypot(asin @ v, acos @ v)
    return base + osc, None


def _check_drift_sampler(fam, spec, window, probe_states, n_samples, rng):
    if probe_states is None or rng is None:
        raise ValueError("sampler drift checks need probe_states and rng")
    if not callable(spec.V):
        raise ValueError("sampler drift checks need a callable V")
    times = window_times(window)
    worst = -np.inf
    worst_site = None
    radius = 0.0
    for n in times:
        for x in probe_states:
            vx = float(spec.V(x))
            if not np.isfinite(vx):
                continue
            draws = np.array([float(spec.V(fam.step(int(n) - 1, x, rng)))
                              for _ in range(n_samples)])
            est = float(draws.mean())
            rad = 3.0 * float(draws.std(ddof=1)) / np.sqrt(n_samples)
            slack = est - (spec.gamma * vx + spec.C)
            if slack > worst:
                worst, worst_site, radius = slack, (int(n), x), rad
    return DriftReport(ok=worst + radius <= RESIDUAL_TOL, worst_slack=worst,
                       worst_site=worst_site, mode="monte-carlo", radius=radius)


# ---------------------------------------------------------------------------
# Doeblin minorization
# ---------------------------------------------------------------------------


def find_doeblin_certificate(fam: FiniteKernelFamily, R: float, V, window):
    """Best single-measure minorization over the small set {V <= R}.

    Uses columnwise minima over the window and all small-set rows:
    ``beta = sum_y colmin(y)`` and ``nu = colmin / beta``.  Returns ``None``
    when every column minimum vanishes.
    """
    if fam.kind != "finite":
        raise ValueError("certificate search requires a finite kernel family")
    v = _v_vector(V, fam.states)
    mask = v <= R
    if not mask.any():
        raise ValueError("the sublevel set {V <= R} is empty")
    small = tuple(s for s, ok in zip(fam.states, mask) if ok)
    if window is None:
        bounds = fam.entry_bounds()
        if bounds is None:
            raise ValueError("analytic minorization needs a waveform kernel")
        colmin = bounds[0][mask].min(axis=0)
    else:
        times = window_times(window)
        stacks = fam.matrices_at(times - 1)
        colmin = stacks[:, mask, :].min(axis=(0, 1))
    colmin = np.maximum(colmin, 0.0)
    beta = float(colmin.sum())
    if beta <= 0.0:
        return None
    nu = ProbMeasure(fam.states, colmin / beta)
    win = None if window is None else (int(window_times(window)[0]), int(window_times(window)[-1]))
    return DoeblinCertificate(beta=beta, nu=nu, R=float(R), small_set=small, window=win)


def verify_doeblin(fam: FiniteKernelFamily, cert: DoeblinCertificate) -> DoeblinReport:
    """Entrywise check of ``P(n-1, x, n, y) - beta nu(y) >= -1e-12``.

    ``worst_slack`` is the most negative residual found (nonnegative values
    mean the minorization holds with room to spare).
    """
    if fam.kind != "finite":
        raise ValueError("verification requires a finite kernel family")
    if tuple(cert.nu.states) != fam.states:
        raise ValueError("certificate measure is over a different state list")
    rows = [fam.state_index(x) for x in cert.small_set]
    floor = cert.beta * cert.nu.weights
    if cert.window is None:
        bounds = fam.entry_bounds()
        if bounds is None:
            raise ValueError("analytic verification needs a waveform kernel")
        resid = bounds[0][rows] - floor[None, :]
        i, j = np.unravel_index(int(np.argmin(resid)), resid.shape)
        worst_site = ("analytic", cert.small_set[i], fam.states[j])
    else:
        times = window_times(cert.window)
        stacks = fam.matrices_at(times - 1)
        resid = stacks[:, rows, :] - floor[None, None, :]
        k, i, j = np.unravel_index(int(np.argmin(resid)), resid.shape)
        worst_site = (int(times[k]), cert.small_set[i], fam.states[j])
    worst = float(resid.min())
    return DoeblinReport(ok=worst >= -RESIDUAL_TOL, worst_slack=worst, worst_site=worst_site)


def contraction_from_doeblin(cert: DoeblinCertificate) -> ContractionCertificate:
    """One-step contraction implied by a minorization: delta = beta.

    Splitting each small-set row as ``beta nu + (1-beta) Q_x`` bounds the
    pairwise row distance by ``2(1-beta)``.
    """
    return ContractionCertificate(n0=1, delta=cert.beta, R=2.0 * cert.R, window=cert.window)


def dobrushin_pair_bound(fam: FiniteKernelFamily, n0: int, R: float, V, window) -> PairBoundReport:
    """Max total variation between n0-step rows over pairs with V(x)+V(y) <= R."""
    if fam.kind != "finite":
        raise ValueError("pair bounds require a finite kernel family")
    if n0 < 1:
        raise ValueError("n0 must be a positive integer")
    v = _v_vector(V, fam.states)
    pair_mask = (v[:, None] + v[None, :]) <= R
    np.fill_diagonal(pair_mask, False)
    if not pair_mask.any():
        raise ValueError("the pair set {V(x)+V(y) <= R} is empty")
    times = window_times(window)
    max_tv = 0.0
    worst = None
    if n0 == 1:
        for chunk in np.array_split(times, max(1, times.size // 4096)):
            stacks = fam.matrices_at(chunk - 1)
            diffs = np.abs(stacks[:, :, None, :] - stacks[:, None, :, :]).sum(axis=-1)
            diffs = np.where(pair_mask[None, :, :], diffs, -np.inf)
            k, i, j = np.unravel_index(int(np.argmax(diffs)), diffs.shape)
            if diffs[k, i, j] > max_tv:
                max_tv = float(diffs[k, i, j])
                worst = (int(chunk[k]), fam.states[i], fam.states[j])
    else:
        for n in times:
            M = np.eye(len(fam.states))
            for key in range(int(n) - n0, int(n)):
                M = M @ fam.matrix_at(key)
            diffs = np.abs(M[:, None, :] - M[None, :, :]).sum(axis=-1)
            diffs = np.where(pair_mask, diffs, -np.inf)
            i, j = np.unravel_index(int(np.argmax(diffs)), diffs.shape)
            if diffs[i, j] > max_tv:
                max_tv = float(diffs[i, j])
                worst = (int(n), fam.states[i], fam.states[j])
    if worst is None:
        worst = (int(times[0]),) + tuple(
            fam.states[k] for k in np.argwhere(pair_mask)[0]
        )
    return PairBoundReport(max_tv=max_tv, implied_delta=1.0 - max_tv / 2.0, worst_site=worst)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def certificate_to_dict(drift: DriftSpec | None, cert: DoeblinCertificate | None,
                        reports: dict | None = None) -> dict:
    doc: dict = {}
    if drift is not None:
        v = drift.V
        if callable(v):
            v_doc = None  # callable V is not serializable
        else:
            arr = np.asarray(v, dtype=float)
            v_doc = float(arr) if arr.ndim == 0 else arr.tolist()
        doc["drift"] = {"V": v_doc, "gamma": drift.gamma, "C": drift.C, "R": drift.R}
    if cert is not None:
        doc["doeblin"] = {
            "beta": cert.beta,
            "nu": {"states": list(cert.nu.states), "weights": cert.nu.weights.tolist()},
            "R": cert.R,
            "small_set": list(cert.small_set),
            "window": list(cert.window) if cert.window is not None else None,
            "trusted": cert.trusted,
        }
    if reports:
        doc["reports"] = {k: (r.to_dict() if hasattr(r, "to_dict") else r)
                          for k, r in reports.items()}
    return doc


def save_certificate(path, drift, cert, reports=None) -> None:
    Path(path).write_text(json.dumps(certificate_to_dict(drift, cert, reports),
                                     sort_keys=True, indent=2) + "\n")


def load_certificate(path) -> tuple[DriftSpec | None, DoeblinCertificate | None]:
    doc = json.loads(Path(path).read_text())
    drift = None
    if "drift" in doc:
        d = doc["drift"]
        drift = DriftSpec(V=np.asarray(d["V"], dtype=float) if isinstance(d["V"], list) else d["V"],
                          gamma=d["gamma"], C=d["C"], R=d["R"])
    cert = None
    if "doeblin" in doc:
        c = doc["doeblin"]
        nu = ProbMeasure(tuple(c["nu"]["states"]), np.asarray(c["nu"]["weights"]))
        cert = DoeblinCertificate(
            beta=c["beta"], nu=nu, R=c["R"], small_set=tuple(c["small_set"]),
            window=tuple(c["window"]) if c.get("window") else None,
            trusted=c.get("trusted", False),
        )
    return drift, cert
