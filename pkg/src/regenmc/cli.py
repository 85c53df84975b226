"""Batch front end: config parsing, task dispatch, and report bundles.

Configs are JSON documents with a model, a task, a seed (mandatory for
stochastic tasks), and task-specific parameters.  Bundles are written
atomically (temp directory, then swap) and contain CSV tables, a summary
document, the normalized config, and a manifest of file hashes; identical
configs reproduce byte-identical bundles regardless of worker count.

Exit codes: 0 pass, 2 statistical-test failure, 3 certificate failure,
4 config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .conditions import (
    DoeblinCertificate,
    DriftSpec,
    check_drift,
    dobrushin_pair_bound,
    find_doeblin_certificate,
    verify_doeblin,
)
from .invariant import fit_ergodic_rate, check_invariance, family_table, solve_family, v_moment
from .kernels import BUILTIN_MODELS, ObservableG, ProbMeasure, builtin_model, load_model
from .lln import (
    cesaro_invariant_mean,
    check_drift_tail_bound,
    coalescing_couple,
    empirical_return_survival,
    slln_run,
    staircase_model,
    tail_fit,
    taboo_tail_exact,
    wlln_covariance_exact,
    wlln_variance_bound,
    wlln_variance_curve,
)
from .splitting import SplitModel, marginal_consistency, simulate_split_chain

EXIT_OK = 0
EXIT_STATISTICAL = 2
EXIT_CERTIFICATE = 3
EXIT_CONFIG = 4

TASKS = ("verify", "invariant", "simulate", "slln", "wlln", "tail", "couple")
STOCHASTIC_TASKS = {"simulate", "slln", "tail", "couple"}

_REQUIRED = {
    "verify": ("window",),
    "invariant": ("k_range",),
    "simulate": ("steps",),
    "slln": ("steps", "replications"),
    "wlln": ("n_max", "i_range"),
    "tail": ("steps", "n_samples", "n_max"),
    "couple": ("steps", "replications"),
}

MODEL_NAMES = BUILTIN_MODELS + ("four_state_staircase",)


class ConfigError(Exception):
    """Carries every validation problem found in a config, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    model: object
    task: str
    seed: int | None
    params: dict
    output: str | None = None

    def normalized(self) -> dict:
        doc = {"model": self.model, "task": self.task, "params": self.params}
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.output is not None:
            doc["output"] = self.output
        return doc

    def config_hash(self) -> str:
        payload = json.dumps(self.normalized(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.normalized() == other.normalized()


@dataclass
class ReportBundle:
    summary: dict
    tables: dict
    provenance: dict
    config: dict
    exit_code: int = EXIT_OK


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _resolve_model(spec, errors):
    if isinstance(spec, str):
        if spec == "four_state_staircase":
            return staircase_model()[0]
        if spec in BUILTIN_MODELS:
            return builtin_model(spec)
        errors.append(f"unknown model {spec!r}; known: {', '.join(MODEL_NAMES)}")
        return None
    if isinstance(spec, dict):
        try:
            return load_model(spec)
        except (ValueError, KeyError) as exc:
            errors.append(f"invalid inline model: {exc}")
            return None
    errors.append("model must be a name or an inline definition")
    return None


def parse_config(source, task: str | None = None) -> ExperimentConfig:
    """Validate a config document; raises ConfigError with every problem found."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text() if os.path.exists(str(source)) else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    else:
        doc = dict(source)
    errors: list[str] = []
    model_spec = doc.get("model")
    if model_spec is None:
        errors.append("missing key 'model'")
        fam = None
    else:
        fam = _resolve_model(model_spec, errors)
    task = doc.get("task", task)
    if task is None:
        errors.append("missing key 'task'")
    elif task not in TASKS:
        errors.append(f"unknown task {task!r}; known: {', '.join(TASKS)}")
    params = dict(doc.get("params", {}))
    seed = doc.get("seed")
    if task in STOCHASTIC_TASKS and seed is None:
        errors.append(f"task {task!r} is stochastic: 'seed' is mandatory")
    if seed is not None and not isinstance(seed, int):
        errors.append("'seed' must be an integer")
    if task in _REQUIRED:
        for key in _REQUIRED[task]:
            if key not in params:
                errors.append(f"task {task!r} requires params.{key}")
    _validate_ranges(task, params, fam, errors)
    if errors:
        raise ConfigError(errors)
    norm_model = model_spec if isinstance(model_spec, str) else fam.to_dict()
    return ExperimentConfig(model=norm_model, task=task, seed=seed, params=params,
                            output=doc.get("output"))


def _validate_ranges(task, params, fam, errors):
    gamma = params.get("gamma")
    if gamma is not None and not (0.0 < gamma < 1.0):
        errors.append(f"gamma out of range: {gamma} not in (0, 1)")
    beta = params.get("beta")
    if beta is not None and not (0.0 < beta < 1.0):
        errors.append(f"beta out of range: {beta} not in (0, 1)")
    C = params.get("C")
    if C is not None and C <= 0:
        errors.append(f"C out of range: {C} <= 0")
    R = params.get("R")
    if R is not None and gamma is not None and C is not None:
        if R <= C / (1.0 - gamma) ** 2:
            errors.append(
                f"R={R} violates the strict inequality R > C/(1-gamma)^2 "
                f"= {C / (1.0 - gamma) ** 2}"
            )
    for key in ("steps", "replications", "n_samples", "n_max"):
        val = params.get(key)
        if val is not None and (not isinstance(val, int) or val < 1):
            errors.append(f"params.{key} must be a positive integer, got {val!r}")
    for key in ("window", "k_range", "i_range"):
        rng = params.get(key)
        if rng is not None:
            if (not isinstance(rng, (list, tuple)) or len(rng) != 2
                    or rng[1] < rng[0]):
                errors.append(f"params.{key} must be a nonempty [lo, hi] range")
    nu = params.get("nu")
    if nu is not None:
        if fam is not None and len(nu) != len(fam.states):
            errors.append("params.nu does not match the model's state list")
        elif abs(sum(nu) - 1.0) > 1e-9 or any(w < 0 for w in nu):
            errors.append("params.nu must be a probability vector")


# ---------------------------------------------------------------------------
# shared task helpers
# ---------------------------------------------------------------------------


def _model_and_drift(cfg: ExperimentConfig):
    fam = _resolve_model(cfg.model, errors := [])
    if errors or fam is None:
        raise ConfigError(errors or ["model failed to resolve"])
    defaults = dict(fam.drift_defaults or {})
    p = cfg.params
    V = p.get("V", defaults.get("V"))
    drift = DriftSpec(
        V=np.asarray(V, dtype=float) if isinstance(V, (list, tuple)) else float(V),
        gamma=float(p.get("gamma", defaults.get("gamma"))),
        C=float(p.get("C", defaults.get("C"))),
        R=float(p.get("R", defaults.get("R"))),
    )
    return fam, drift


def _certificate(fam, drift, params, window):
    beta, nu = params.get("beta"), params.get("nu")
    if beta is not None and nu is not None:
        return DoeblinCertificate(
            beta=float(beta), nu=ProbMeasure(fam.states, np.asarray(nu, dtype=float)),
            R=drift.R, small_set=drift.small_set(fam.states), window=window,
        )
    cert = find_doeblin_certificate(fam, drift.R, drift.V, window)
    if cert is None:
        raise ValueError("no positive minorization exists on this window")
    return cert


def _observable(params, states) -> ObservableG:
    spec = params.get("g", {"kind": "identity"})
    kind = spec.get("kind", "identity")
    if kind == "identity":
        values = [float(s) for s in states]
        return ObservableG(g=lambda x: float(x), bound=max(abs(v) for v in values))
    if kind == "indicator":
        target = spec["state"]
        return ObservableG(g=lambda x: 1.0 if x == target else 0.0, bound=1.0)
    if kind == "table":
        values = {s: float(v) for s, v in zip(states, spec["values"])}
        bound = float(spec.get("bound", max(abs(v) for v in values.values())))
        return ObservableG(g=lambda x: values[x], bound=bound)
    raise ValueError(f"unknown observable kind {kind!r}")


def _split_model(cfg: ExperimentConfig, window=None):
    fam, drift = _model_and_drift(cfg)
    if window is None:
        window = tuple(cfg.params["window"]) if "window" in cfg.params else None
        if window is None and fam.entry_bounds() is None:
            lo, hi = fam.window
            window = (lo + 1, hi + 1)
    cert = _certificate(fam, drift, cfg.params, window)
    return fam, drift, SplitModel(fam, cert, drift)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def _task_verify(cfg, workers):
    fam, drift = _model_and_drift(cfg)
    window = tuple(cfg.params["window"])
    drift_rep = check_drift(fam, drift, window)
    rows = [["drift", drift_rep.ok, drift_rep.worst_slack, str(drift_rep.worst_site)]]
    summary = {"drift": drift_rep.to_dict()}
    ok = drift_rep.ok
    if cfg.params.get("beta") is not None and cfg.params.get("nu") is not None:
        cert = DoeblinCertificate(
            beta=float(cfg.params["beta"]),
            nu=ProbMeasure(fam.states, np.asarray(cfg.params["nu"], dtype=float)),
            R=drift.R, small_set=drift.small_set(fam.states), window=window,
        )
        rep = verify_doeblin(fam, cert)
        rows.append(["doeblin", rep.ok, rep.worst_slack, str(rep.worst_site)])
        summary["doeblin"] = rep.to_dict()
        ok = ok and rep.ok
    found = find_doeblin_certificate(fam, drift.R, drift.V, window)
    if found is None:
        rows.append(["doeblin_search", False, 0.0, "no positive minorization"])
        summary["doeblin_search"] = {"found": False}
        ok = False
    else:
        rows.append(["doeblin_search", True, found.beta, str(found.nu.weights.tolist())])
        summary["doeblin_search"] = {
            "found": True, "beta": found.beta, "nu": found.nu.weights.tolist(),
        }
    pair = dobrushin_pair_bound(fam, 1, 2.0 * drift.R, drift.V, window)
    rows.append(["dobrushin", True, pair.max_tv, f"implied_delta={pair.implied_delta}"])
    summary["dobrushin"] = pair.to_dict()
    summary["ok"] = bool(ok)
    tables = {"checks": (["check", "ok", "value", "detail"], rows)}
    return summary, tables, EXIT_OK if ok else EXIT_CERTIFICATE


def _task_invariant(cfg, workers):
    fam, drift = _model_and_drift(cfg)
    lo, hi = cfg.params["k_range"]
    tol = float(cfg.params.get("tol", 1e-12))
    max_depth = int(cfg.params.get("max_depth", 200))
    family = solve_family(fam, range(int(lo), int(hi) + 1), tol, max_depth)
    pairs = [(k, k + 1) for k in range(int(lo), int(hi))]
    inv = check_invariance(fam, family, pairs) if pairs else None
    moments, sup = v_moment(family, drift.V)
    fit = fit_ergodic_rate(fam, family, drift.V,
                           range(1, int(cfg.params.get("fit_depth", 25)) + 1),
                           [int(lo), int(hi)])
    g = _observable(cfg.params, fam.states)
    grid = [n for n in (10, 100, 1000, 10000) if 0 < n <= hi]
    cesaro = cesaro_invariant_mean(family, g, grid) if int(lo) <= 0 and grid else None
    ok = inv is None or inv.max_tv_violation <= 1e-10
    summary = {
        "ok": bool(ok),
        "depth_used": family.depth_used,
        "residual": family.residual,
        "invariance": inv.to_dict() if inv else None,
        "v_moment_sup": sup,
        "ergodic_fit": {"alpha": fit.alpha, "M_tilde": fit.M_tilde,
                        "residual_norm": fit.residual_norm},
        "cesaro": None if cesaro is None else dict(zip(map(str, grid), cesaro.tolist())),
    }
    tables = {
        "family": (["k", "state", "mass", "depth", "residual"], family_table(family)),
        "moments": (["k", "v_moment"], [[k, m] for k, m in moments.items()]),
    }
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


def _task_simulate(cfg, workers):
    fam, drift, model = _split_model(cfg)
    p = cfg.params
    steps = int(p["steps"])
    s = int(p.get("s", 0))
    start = p.get("start", fam.states[0])
    traj, log = simulate_split_chain(model, start, s, steps, int(cfg.seed))
    beta = model.cert.beta
    visits = int(len(log.sigma))
    rings = int(len(log.tau))
    phat = rings / visits if visits else 0.0
    sigma3 = 3.0 * math.sqrt(beta * (1.0 - beta) / visits) if visits else math.inf
    ok = abs(phat - beta) <= sigma3
    mrep = marginal_consistency(model, start, s, min(10, steps),
                                int(p.get("marginal_samples", 20000)), int(cfg.seed) + 1)
    ok = ok and mrep.max_gap < 3.0 * mrep.scale + 0.01
    rows_t = [[traj.start_time + i, traj.states[i], int(traj.levels[i]),
               int(traj.levels[i])] for i in range(len(traj))]
    L = log.L
    rows_r = [[k, int(tk), int(L[k]) if k < len(L) else ""]
              for k, tk in enumerate(log.tau)]
    summary = {
        "ok": bool(ok),
        "beta": beta,
        "bell_rate": phat,
        "bell_band_3sigma": sigma3,
        "regenerations": rings,
        "marginal_max_gap": mrep.max_gap,
        "uniforms_consumed": traj.uniforms_consumed,
    }
    tables = {
        "trajectory": (["t", "state", "level", "is_regeneration"], rows_t),
        "regenerations": (["k", "tau_k", "L_k"], rows_r),
    }
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


def _task_slln(cfg, workers):
    fam, drift, model = _split_model(cfg)
    p = cfg.params
    family = solve_family(fam, [0])
    g = _observable(p, fam.states)
    report = slln_run(model, family, g, p.get("start", fam.states[0]),
                      int(p["steps"]), int(cfg.seed), int(p["replications"]),
                      n_grid=p.get("n_grid"), workers=workers)
    threshold = p.get("threshold")
    ok = True if threshold is None else report.max_abs_final_gap < float(threshold)
    summary = {
        "ok": bool(ok),
        "max_abs_final_gap": report.max_abs_final_gap,
        "threshold": threshold,
        "steps": report.steps,
        "replications": report.replications,
        "N_over_n_mean": float(report.N_over_n.mean()),
    }
    tables = {
        "gaps": (["replication", "n", "gap", "N_over_n"], report.gaps_table()),
        "cycles": (["replication", "n_cycles", "L_mean", "L_var", "D_mean", "D_var",
                    "N_over_n"], report.cycles_table()),
    }
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


def _task_wlln(cfg, workers):
    fam, drift = _model_and_drift(cfg)
    p = cfg.params
    n_max = int(p["n_max"])
    ilo, ihi = (int(v) for v in p["i_range"])
    family = solve_family(fam, range(min(0, ilo), max(n_max, ihi) + 1))
    g = _observable(p, fam.states)
    table, fit = wlln_covariance_exact(fam, family, g, range(ilo, ihi + 1))
    grid = sorted({n for n in range(1, n_max + 1)
                   if n <= 10 or n % max(1, n_max // 100) == 0 or n == n_max})
    curve = wlln_variance_curve(fam, family, g, grid)
    bound = wlln_variance_bound(g, fit)
    ok = bool(curve.sup <= bound)
    cov_rows = [[i, j, float(table.matrix[a, b])]
                for a, i in enumerate(table.times) for b, j in enumerate(table.times)
                if j >= i]
    var_rows = [[n, float(v)] for n, v in zip(curve.n_grid, curve.var_over_n)]
    summary = {
        "ok": ok,
        "cov_alpha": fit.alpha,
        "cov_C": fit.C,
        "var_over_n_sup": curve.sup,
        "var_bound": bound,
    }
    tables = {
        "covariance": (["i", "j", "cov"], cov_rows),
        "variance": (["n", "var_over_n"], var_rows),
    }
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


def _task_tail(cfg, workers):
    fam, drift, model = _split_model(cfg)
    p = cfg.params
    steps, n_samples, n_max = int(p["steps"]), int(p["n_samples"]), int(p["n_max"])
    s = int(p.get("s", 0))
    x = p.get("start", fam.states[0])
    traj, log = simulate_split_chain(model, x, s, steps, int(cfg.seed))
    fit = tail_fit(log) if log.cycle_count() >= 50 else None
    c_set = tuple(p.get("C_set", model.cert.small_set))
    exact = taboo_tail_exact(fam, c_set, s, x, n_max)
    off_set = [lbl for lbl in fam.states if lbl not in set(c_set)]
    emp = None
    surv_ok = True
    if off_set:
        probe = off_set[0]
        emp = empirical_return_survival(model, c_set, s, probe, n_max, n_samples,
                                        int(cfg.seed) + 1)
        exact_probe = taboo_tail_exact(fam, c_set, s, probe, n_max)
        sig = 3.0 * np.sqrt(np.maximum(exact_probe * (1 - exact_probe), 0.0) / n_samples)
        surv_ok = bool(np.all(np.abs(emp - exact_probe) <= sig + 1e-12))
        bound_rep = check_drift_tail_bound(fam, drift, [(s, probe)], n_max)
        surv_ok = surv_ok and bound_rep.ok
    ok = surv_ok and (fit is None or fit.ok)
    rows = [[n, float(exact[n]), float(emp[n]) if emp is not None else ""]
            for n in range(n_max + 1)]
    summary = {
        "ok": bool(ok),
        "zeta": None if fit is None or not fit.ok else fit.zeta,
        "K": None if fit is None or not fit.ok else fit.K,
        "cycles": log.cycle_count(),
        "survival_check": surv_ok,
        "entrance_convention": "first entrance strictly after the start (tau > 0 always)",
    }
    tables = {"survival": (["n", "exact", "empirical"], rows)}
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


def _task_couple(cfg, workers):
    fam, drift, model = _split_model(cfg)
    p = cfg.params
    start_a = p.get("start_a", fam.states[0])
    start_b = p.get("start_b", "mu0")
    if start_b == "mu0":
        from .invariant import solve_backward
        start_b = solve_backward(fam, 0)[0]
    report = coalescing_couple(model, start_a, start_b, int(p["steps"]),
                               int(cfg.seed), replications=int(p["replications"]),
                               workers=workers)
    ok = report.all_coalesced and report.equality_verified
    summary = {
        "ok": bool(ok),
        "mean_T": report.mean_T,
        "coalesced": int(report.coalesced.sum()),
        "replications": report.replications,
        "equality_verified": report.equality_verified,
    }
    tables = {"coupling": (["replication", "T", "coalesced"], report.table())}
    return summary, tables, EXIT_OK if ok else EXIT_STATISTICAL


_TASK_RUNNERS = {
    "verify": _task_verify,
    "invariant": _task_invariant,
    "simulate": _task_simulate,
    "slln": _task_slln,
    "wlln": _task_wlln,
    "tail": _task_tail,
    "couple": _task_couple,
}


def dispatch(cfg: ExperimentConfig, workers: int = 1) -> ReportBundle:
    """Run the configured task and assemble a bundle (never raises for
    certificate failures; those are reported with exit code 3)."""
    provenance = {
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "seed": cfg.seed,
    }
    try:
        summary, tables, code = _TASK_RUNNERS[cfg.task](cfg, workers)
    except (ValueError, KeyError) as exc:
        summary = {"ok": False, "error": f"{cfg.task}: {exc}"}
        tables = {}
        code = EXIT_CERTIFICATE
    summary["task"] = cfg.task
    return ReportBundle(summary=summary, tables=tables, provenance=provenance,
                        config=cfg.normalized(), exit_code=code)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def _format_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return v


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def emit(bundle: ReportBundle, output_dir) -> dict:
    """Write the bundle atomically; returns {filename: sha256}."""
    output_dir = Path(output_dir)
    output_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=output_dir.name + ".tmp-", dir=output_dir.parent))
    try:
        hashes = {}
        for name, (header, rows) in sorted(bundle.tables.items()):
            path = tmp / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow([_format_cell(v) for v in row])
            hashes[f"{name}.csv"] = _sha256(path)
        doc = {"summary": bundle.summary, "provenance": bundle.provenance}
        (tmp / "summary.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")
        hashes["summary.json"] = _sha256(tmp / "summary.json")
        (tmp / "config.json").write_text(
            json.dumps(bundle.config, sort_keys=True, indent=2) + "\n")
        hashes["config.json"] = _sha256(tmp / "config.json")
        (tmp / "manifest.json").write_text(
            json.dumps({"files": hashes}, sort_keys=True, indent=2) + "\n")
        if output_dir.exists():
            shutil.rmtree(output_dir)
        os.replace(tmp, output_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return hashes


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="regenmc",
        description="Verify, simulate, and test ergodic averages of "
                    "time-inhomogeneous Markov chains.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in TASKS:
        p = sub.add_parser(verb, help=f"run the {verb} task from a config")
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--output", default=None, help="bundle output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get("REGENMC_WORKERS", "1")),
                       help="parallel work units (results are worker-count invariant)")
    sub.add_parser("models", help="list built-in model names")
    args = parser.parse_args(argv)

    if args.verb == "models":
        for name in MODEL_NAMES:
            print(name)
        return EXIT_OK

    try:
        doc = json.loads(Path(args.config).read_text())
        if args.seed is not None:
            doc["seed"] = args.seed
        cfg = parse_config(doc, task=args.verb)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    bundle = dispatch(cfg, workers=max(1, args.workers))
    out = args.output or cfg.output
    if out:
        emit(bundle, out)
        print(f"bundle written to {out}")
    print(json.dumps(bundle.summary, sort_keys=True, default=_json_default))
    return bundle.exit_code


if __name__ == "__main__":
    sys.exit(main())
