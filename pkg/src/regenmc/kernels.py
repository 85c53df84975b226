"""Time-indexed transition kernels, probability measures, and built-in models.

A finite kernel family stores the one-step row-stochastic matrix for the step
from time ``n`` to ``n+1`` under key ``n``.  Closed-form (waveform) entries
are functions of the arrival time, so a step whose coefficients are written
in terms of the time being stepped *into* lives under key ``arrival - 1``.

Total variation uses the two-sided convention throughout: the distance
between probability measures is the L1 distance of their weight vectors and
ranges over [0, 2].
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TimeIndex = int

_SUM_TOL = 1e-12


# ---------------------------------------------------------------------------
# probability measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbMeasure:
    """Probability measure over a finite state list.

    ``kind`` is ``"finite"`` for exact weights and ``"empirical"`` for a
    histogram of samples.  Empirical measures record their sample count so
    downstream tolerances can scale as ``1/sqrt(n_samples)``.
    """

    states: tuple
    weights: np.ndarray
    kind: str = "finite"
    n_samples: int | None = None

    def __post_init__(self):
        states = tuple(self.states)
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 1 or w.shape[0] != len(states):
            raise ValueError("weights must be a vector matching the state list")
        if w.size == 0:
            raise ValueError("state list must be nonempty")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"weights sum to {total!r}; expected 1 within {_SUM_TOL}")
        if self.kind not in ("finite", "empirical"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.kind == "empirical" and not (self.n_samples and self.n_samples > 0):
            raise ValueError("empirical measures must record a positive sample count")
        w.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point_mass(cls, states, x) -> "ProbMeasure":
        states = tuple(states)
        w = np.zeros(len(states))
        try:
            w[states.index(x)] = 1.0
        except ValueError:
            raise ValueError(f"unknown state label {x!r}") from None
        return cls(states, w)

    @classmethod
    def uniform(cls, states) -> "ProbMeasure":
        states = tuple(states)
        return cls(states, np.full(len(states), 1.0 / len(states)))

    @classmethod
    def from_samples(cls, states, samples) -> "ProbMeasure":
        """Empirical measure from a sequence of state labels."""
        states = tuple(states)
        index = {s: i for i, s in enumerate(states)}
        counts = np.zeros(len(states))
        n = 0
        for x in samples:
            counts[index[x]] += 1.0
            n += 1
        if n == 0:
            raise ValueError("cannot build an empirical measure from zero samples")
        return cls(states, counts / n, kind="empirical", n_samples=n)

    def weight_of(self, x) -> float:
        return float(self.weights[self.states.index(x)])

    def integrate(self, values) -> float:
        """Integral of a function given by its vector of values over states."""
        v = np.asarray(values, dtype=float)
        if v.shape != self.weights.shape:
            raise ValueError("value vector does not match the state list")
        return float(self.weights @ v)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight multiset of sampled states on a continuous state space."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape[0] == 0:
            raise ValueError("empirical measure needs at least one sample")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class ObservableG:
    """Bounded test function with a certified sup-norm bound."""

    g: Callable
    bound: float

    def __call__(self, x) -> float:
        return float(self.g(x))

    def values(self, states) -> np.ndarray:
        """Tabulate over a state list, checking the certified bound."""
        v = np.array([float(self.g(x)) for x in states])
        if np.any(np.abs(v) > self.bound + 1e-12):
            raise ValueError("observable exceeds its certified sup-norm bound")
        return v


# ---------------------------------------------------------------------------
# waveform entries
# ---------------------------------------------------------------------------

_WAVE_NAMES = ("const", "sin", "cos")


@dataclass(frozen=True)
class Waveform:
    """Scalar matrix entry ``offset + amplitude * wave(t)``.

    ``wave`` is one of ``const``, ``sin``, ``cos``; constants must carry zero
    amplitude.  ``lower``/``upper`` bound the entry over all real ``t``, which
    also bounds it over every integer window.
    """

    wave: str = "const"
    offset: float = 0.0
    amplitude: float = 0.0

    def __post_init__(self):
        if self.wave not in _WAVE_NAMES:
            raise ValueError(f"unknown waveform {self.wave!r}")
        if self.wave == "const" and self.amplitude != 0.0:
            raise ValueError("constant entries must have zero amplitude")

    @property
    def lower(self) -> float:
        return self.offset - abs(self.amplitude)

    @property
    def upper(self) -> float:
        return self.offset + abs(self.amplitude)

    def to_dict(self) -> dict:
        d = {"wave": self.wave, "offset": self.offset}
        if self.wave != "const":
            d["amplitude"] = self.amplitude
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Waveform":
        return cls(
            wave=d.get("wave", "const"),
            offset=float(d.get("offset", 0.0)),
            amplitude=float(d.get("amplitude", 0.0)),
        )


def _wave_coefficients(entries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an entry table into (offset, sin-amplitude, cos-amplitude) arrays."""
    n = len(entries)
    off = np.zeros((n, n))
    asin = np.zeros((n, n))
    acos = np.zeros((n, n))
    for i, row in enumerate(entries):
        for j, w in enumerate(row):
            off[i, j] = w.offset
            if w.wave == "sin":
                asin[i, j] = w.amplitude
            elif w.wave == "cos":
                acos[i, j] = w.amplitude
    return off, asin, acos


# ---------------------------------------------------------------------------
# kernel families
# ---------------------------------------------------------------------------


class KernelFamily:
    """Base class for time-indexed one-step transition kernel families."""

    kind: str
    states: tuple | None
    window: tuple[int, int] | None

    def check_key(self, key: int) -> None:
        """Raise if the step ``key -> key+1`` is outside the validity window."""
        if self.window is not None and not (self.window[0] <= key <= self.window[1]):
            raise ValueError(
                f"time {key} outside the declared validity window {self.window}"
            )

    def state_index(self, x) -> int:
        if self.states is None:
            raise ValueError("state labels are only defined for finite state lists")
        try:
            return self.states.index(x)
        except ValueError:
            raise ValueError(f"unknown state label {x!r}") from None


class FiniteKernelFamily(KernelFamily):
    """Kernel family over a finite state list.

    Backed either by closed-form waveform entries (valid on all of the
    integers) or by an explicit contiguous table of per-time matrices with a
    declared window.  Matrices are validated to be row-stochastic; waveform
    tables are validated structurally so that rows sum to one and entries
    stay nonnegative for every real time argument.
    """

    kind = "finite"

    def __init__(self, states, *, entries=None, matrices=None, window=None,
                 drift_defaults: dict | None = None):
        self.states = tuple(states)
        n = len(self.states)
        if n == 0:
            raise ValueError("state list must be nonempty")
        if (entries is None) == (matrices is None):
            raise ValueError("provide exactly one of waveform entries or explicit matrices")
        self.drift_defaults = dict(drift_defaults) if drift_defaults else None
        if entries is not None:
            entries = tuple(tuple(w for w in row) for row in entries)
            if len(entries) != n or any(len(row) != n for row in entries):
                raise ValueError("entry table must be square over the state list")
            self._entries = entries
            self._off, self._asin, self._acos = _wave_coefficients(entries)
            self._matrices = None
            self.window = None
            self._validate_waveforms()
        else:
            keys = sorted(matrices)
            if keys != list(range(keys[0], keys[0] + len(keys))):
                raise ValueError("explicit matrices must cover a contiguous key range")
            if window is None:
                window = (keys[0], keys[-1])
            if tuple(window) != (keys[0], keys[-1]):
                raise ValueError("declared window does not match the matrix keys")
            stack = np.stack([np.asarray(matrices[k], dtype=float) for k in keys])
            if stack.shape[1:] != (n, n):
                raise ValueError("matrices must be square over the state list")
            self._validate_stochastic(stack)
            stack.setflags(write=False)
            self._entries = None
            self._matrices = stack
            self.window = (keys[0], keys[-1])

    # -- validation ---------------------------------------------------------

    @staticmethod
    def _validate_stochastic(stack: np.ndarray) -> None:
        if np.any(stack < -_SUM_TOL):
            raise ValueError("transition matrices must be entrywise nonnegative")
        sums = stack.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > _SUM_TOL):
            raise ValueError("every transition row must sum to 1 within 1e-12")

    def _validate_waveforms(self) -> None:
        for i, row in enumerate(self._entries):
            if abs(sum(w.offset for w in row) - 1.0) > _SUM_TOL:
                raise ValueError(f"row {i}: offsets must sum to 1")
            s = sum(w.amplitude for w in row if w.wave == "sin")
            c = sum(w.amplitude for w in row if w.wave == "cos")
            if abs(s) > _SUM_TOL or abs(c) > _SUM_TOL:
                raise ValueError(f"row {i}: oscillating amplitudes must cancel")
            for j, w in enumerate(row):
                if w.lower < -_SUM_TOL:
                    raise ValueError(f"entry ({i},{j}) can go negative: lower bound {w.lower}")

    # -- evaluation ---------------------------------------------------------

    def matrix_at(self, key: int) -> np.ndarray:
        """Row-stochastic matrix of the step from time ``key`` to ``key+1``."""
        return self.matrices_at([key])[0]

    def matrices_at(self, keys) -> np.ndarray:
        """Stack of step matrices for an array of keys, shape (K, S, S)."""
        keys = np.asarray(list(keys) if not isinstance(keys, np.ndarray) else keys)
        if keys.size == 0:
            return np.zeros((0, len(self.states), len(self.states)))
        if self._matrices is not None:
            lo, hi = self.window
            if keys.min() < lo or keys.max() > hi:
                raise ValueError(
                    f"time range [{keys.min()}, {keys.max()}] outside the "
                    f"declared validity window {self.window}"
                )
            return self._matrices[keys - lo]
        t = (keys + 1).astype(float)  # waveforms are functions of the arrival time
        out = (
            self._off[None, :, :]
            + np.sin(t)[:, None, None] * self._asin[None, :, :]
            + np.cos(t)[:, None, None] * self._acos[None, :, :]
        )
        return out

    def entry_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """(lower, upper) entry bounds valid for every time, or None."""
        if self._entries is None:
            return None
        lo = np.array([[w.lower for w in row] for row in self._entries])
        hi = np.array([[w.upper for w in row] for row in self._entries])
        return lo, hi

    def wave_coefficients(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        if self._entries is None:
            return None
        return self._off, self._asin, self._acos

    # -- identity -----------------------------------------------------------

    def to_dict(self) -> dict:
        """Normalized, serializable model definition."""
        d: dict = {"states": list(self.states)}
        if self._entries is not None:
            d["kind"] = "waveform"
            d["entries"] = [[w.to_dict() for w in row] for row in self._entries]
        else:
            lo, hi = self.window
            d["kind"] = "explicit"
            d["window"] = [lo, hi]
            d["matrices"] = {str(k): self._matrices[k - lo].tolist() for k in range(lo, hi + 1)}
        if self.drift_defaults:
            d["drift"] = {
                k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v)
                for k, v in self.drift_defaults.items()
            }
        return d

    def content_hash(self) -> str:
        """Stable hash of the kernel definition, used as a cache key."""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


class SamplerKernelFamily(KernelFamily):
    """Kernel family backed by a user sampler on a general state space.

    ``step(n, x, rng)`` must return a draw from the one-step kernel out of
    time ``n``.  A density evaluator ``density(n, x, y)`` is optional and
    enables residual rejection sampling in the splitting construction.
    """

    kind = "sampler"

    def __init__(self, step, *, states=None, dim=None, density=None, window=None):
        if states is None and dim is None:
            raise ValueError("declare either a finite state list or a real-vector dimension")
        self.step = step
        self.states = tuple(states) if states is not None else None
        self.dim = dim
        self.density = density
        self.window = tuple(window) if window is not None else None
        self.drift_defaults = None

    def sample_steps(self, n: int, x, rng, count: int) -> list:
        self.check_key(n)
        return [self.step(n, x, rng) for _ in range(count)]


def as_sampler(fam: FiniteKernelFamily, *, window=None) -> SamplerKernelFamily:
    """Wrap a finite family as a sampler kernel (inverse-CDF draws)."""
    states = fam.states

    def step(n, x, rng):
        row = fam.matrix_at(n)[fam.state_index(x)]
        return states[int(np.searchsorted(np.cumsum(row), rng.random()))]

    def density(n, x, y):
        return float(fam.matrix_at(n)[fam.state_index(x), fam.state_index(y)])

    return SamplerKernelFamily(step, states=states, density=density, window=window)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def eval_step_kernel(fam: KernelFamily, n: TimeIndex, x, *, n_samples: int | None = None,
                     rng=None):
    """One-step law out of state ``x`` at time ``n``.

    Finite families return the exact matrix row.  Sampler families require a
    requested sample count and a random generator, and return an empirical
    measure of that size.
    """
    if fam.kind == "finite":
        row = fam.matrix_at(n)[fam.state_index(x)]
        return ProbMeasure(fam.states, row)
    if n_samples is None or rng is None:
        raise ValueError("sampler kernels need n_samples and rng to evaluate a step")
    draws = fam.sample_steps(n, x, rng, n_samples)
    if fam.states is not None:
        return ProbMeasure.from_samples(fam.states, draws)
    return EmpiricalMeasure(np.asarray(draws, dtype=float))


def compose_interval(fam: KernelFamily, m: TimeIndex, n: TimeIndex) -> np.ndarray:
    """Product matrix of the steps from time ``m`` through time ``n``.

    Returns the identity for ``m == n``.  Only finite families compose in
    closed form.
    """
    if fam.kind != "finite":
        raise ValueError("composition requires a finite kernel family")
    if m > n:
        raise ValueError(f"need m <= n, got m={m}, n={n}")
    size = len(fam.states)
    if m == n:
        return np.eye(size)
    out = np.eye(size)
    for block in _key_blocks(m, n):
        for mat in fam.matrices_at(block):
            out = out @ mat
    return out


def _key_blocks(m: int, n: int, block: int = 4096):
    keys = np.arange(m, n)
    for i in range(0, keys.size, block):
        yield keys[i : i + block]


def pushforward(fam: KernelFamily, m: TimeIndex, n: TimeIndex, mu: ProbMeasure) -> ProbMeasure:
    """Left action ``mu P_{m,n}`` of the interval kernel on a measure."""
    if fam.kind != "finite":
        raise ValueError("pushforward requires a finite kernel family")
    if tuple(mu.states) != fam.states:
        raise ValueError("measure is not over this family's state list")
    w = mu.weights @ compose_interval(fam, m, n)
    return ProbMeasure(fam.states, w / w.sum())


def semigroup_apply(fam: KernelFamily, m: TimeIndex, n: TimeIndex, f) -> np.ndarray:
    """Vector ``x -> sum_y P_{m,n}(x, y) f(y)`` over the state list."""
    if fam.kind != "finite":
        raise ValueError("semigroup action requires a finite kernel family")
    values = f.values(fam.states) if isinstance(f, ObservableG) else np.asarray(f, dtype=float)
    if values.shape != (len(fam.states),):
        raise ValueError("observable values do not match the state list")
    return compose_interval(fam, m, n) @ values


def tv_distance(mu, nu) -> float:
    """Total variation distance, two-sided convention with range [0, 2]."""
    if isinstance(mu, ProbMeasure) and isinstance(nu, ProbMeasure):
        if tuple(mu.states) != tuple(nu.states):
            raise ValueError("measures are over different state lists")
        a, b = mu.weights, nu.weights
    else:
        a = mu.weights if isinstance(mu, ProbMeasure) else np.asarray(mu, dtype=float)
        b = nu.weights if isinstance(nu, ProbMeasure) else np.asarray(nu, dtype=float)
        if a.shape != b.shape:
            raise ValueError("weight vectors have mismatched lengths")
    return float(np.abs(a - b).sum())


def weighted_norm(phi, V) -> float:
    """Weighted sup norm ``max_x |phi(x)| / (1 + V(x))``."""
    phi = np.asarray(phi, dtype=float)
    V = np.asarray(V, dtype=float)
    if phi.shape != V.shape:
        raise ValueError("phi and V must have the same length")
    if np.any(V < 0):
        raise ValueError("V must be nonnegative")
    with np.errstate(invalid="ignore"):
        ratios = np.where(np.isinf(V), 0.0, np.abs(phi) / (1.0 + V))
    return float(ratios.max())


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def builtin_model(name: str) -> FiniteKernelFamily:
    """Construct a named built-in model.

    ``two_state_sinusoid``: states {1, 2}; the step into time ``n`` has rows
    ``(1 - a(n), a(n))`` and ``(b(n), 1 - b(n))`` with ``a(n) = 1/3 + sin(n)/6``
    and ``b(n) = 1/4 + cos(n)/8``.

    ``three_state_cycle``: states {1, 2, 3}; time-constant rows that move to
    one of two neighbours with probability 1/2 each.
    """
    if name == "two_state_sinusoid":
        entries = [
            [Waveform("sin", 2.0 / 3.0, -1.0 / 6.0), Waveform("sin", 1.0 / 3.0, 1.0 / 6.0)],
            [Waveform("cos", 1.0 / 4.0, 1.0 / 8.0), Waveform("cos", 3.0 / 4.0, -1.0 / 8.0)],
        ]
        defaults = {"V": 2.0, "gamma": 0.5, "C": 1.0, "R": 8.0}
        return FiniteKernelFamily((1, 2), entries=entries, drift_defaults=defaults)
    if name == "three_state_cycle":
        entries = [
            [Waveform("const", 0.5), Waveform("const", 0.5), Waveform("const", 0.0)],
            [Waveform("const", 0.0), Waveform("const", 0.5), Waveform("const", 0.5)],
            [Waveform("const", 0.5), Waveform("const", 0.0), Waveform("const", 0.5)],
        ]
        defaults = {"V": 2.0, "gamma": 0.5, "C": 1.0, "R": 8.0}
        return FiniteKernelFamily((1, 2, 3), entries=entries, drift_defaults=defaults)
    raise ValueError(f"unknown model name {name!r}")


BUILTIN_MODELS = ("two_state_sinusoid", "three_state_cycle")


def from_step_matrix(states, matrix, *, drift_defaults=None) -> FiniteKernelFamily:
    """Time-constant finite family from a single row-stochastic matrix."""
    matrix = np.asarray(matrix, dtype=float)
    entries = [[Waveform("const", float(v)) for v in row] for row in matrix]
    return FiniteKernelFamily(states, entries=entries, drift_defaults=drift_defaults)


# ---------------------------------------------------------------------------
# model config files
# ---------------------------------------------------------------------------


def load_model(source) -> FiniteKernelFamily:
    """Load a finite model from a config dict or a JSON file path.

    Waveform configs carry ``states`` and an ``entries`` table of
    ``{wave, offset, amplitude}`` objects evaluated at the arrival time of
    each step.  Explicit configs carry per-time ``matrices`` keyed by the
    departure time together with their ``window``.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    if not isinstance(source, dict):
        raise ValueError("model definition must be a mapping")
    if isinstance(source.get("model"), str):
        return builtin_model(source["model"])
    states = source.get("states")
    if not states:
        raise ValueError("model definition is missing 'states'")
    kind = source.get("kind")
    drift = source.get("drift")
    if kind == "waveform":
        entries = [[Waveform.from_dict(e) for e in row] for row in source["entries"]]
        return FiniteKernelFamily(states, entries=entries, drift_defaults=drift)
    if kind == "explicit":
        matrices = {int(k): np.asarray(v, dtype=float) for k, v in source["matrices"].items()}
        return FiniteKernelFamily(
            states, matrices=matrices, window=source.get("window"), drift_defaults=drift
        )
    raise ValueError(f"unknown model kind {kind!r}; expected 'waveform' or 'explicit'")
