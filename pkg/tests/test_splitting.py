import math

import numpy as np
import pytest

import regenmc as rm
from regenmc.splitting import simulate_batch


@pytest.fixture(scope="module")
def two_state():
    return rm.builtin_model("two_state_sinusoid")


@pytest.fixture(scope="module")
def model(two_state):
    drift = rm.DriftSpec.from_model(two_state)
    cert = rm.DoeblinCertificate(0.25, rm.ProbMeasure((1, 2), np.array([0.5, 0.5])),
                                 8.0, (1, 2), window=None)
    return rm.SplitModel(two_state, cert, drift)


@pytest.fixture(scope="module")
def staircase_split():
    fam, drift = rm.staircase_model()
    cert = rm.find_doeblin_certificate(fam, drift.R, drift.V, None)
    return rm.SplitModel(fam, cert, drift), fam, drift


# -- split measures -------------------------------------------------------------


def test_split_point_mass_on_small_set(model):
    lam = rm.ProbMeasure.point_mass((1, 2), 1)
    sm = rm.split_measure(lam, model.cert, 2.0)
    assert sm.mass[0, 0] == pytest.approx(0.75)
    assert sm.mass[0, 1] == pytest.approx(0.25)
    assert sm.total() == pytest.approx(1.0, abs=1e-15)


def test_split_point_mass_off_small_set(staircase_split):
    _, fam, drift = staircase_split
    cert = rm.find_doeblin_certificate(fam, drift.R, drift.V, None)
    lam = rm.ProbMeasure.point_mass(fam.states, 4)  # V=16 > R=7
    sm = rm.split_measure(lam, cert, drift.V)
    assert sm.mass[3, 0] == 1.0
    assert sm.level_mass(1).sum() == 0.0


def test_split_marginal_recovers_measure(model):
    lam = rm.ProbMeasure((1, 2), np.array([0.3, 0.7]))
    sm = rm.split_measure(lam, model.cert, 2.0)
    assert np.allclose(sm.marginal_x().weights, lam.weights, atol=1e-15)
    assert sm.total() == pytest.approx(1.0, abs=1e-15)


# -- split kernel ---------------------------------------------------------------


def test_level_one_row_is_split_nu(model):
    sm = rm.eval_split_kernel(model, 0, rm.SplitState(1, 1))
    assert sm.as_vector() == pytest.approx([3 / 8, 3 / 8, 1 / 8, 1 / 8], abs=1e-15)


def test_residual_row_worked_example(model):
    sm = rm.eval_split_kernel(model, -1, rm.SplitState(1, 0))
    assert sm.marginal_x().weights == pytest.approx([13 / 18, 5 / 18], abs=1e-14)


def test_level_one_off_small_set_is_error(staircase_split):
    smodel, _, _ = staircase_split
    with pytest.raises(ValueError, match="unreachable"):
        rm.eval_split_kernel(smodel, 0, rm.SplitState(4, 1))


def test_split_kernel_rows_are_probabilities(model, staircase_split):
    smodel, _, _ = staircase_split
    for mdl, times in ((model, range(-30, 30)), (smodel, range(0, 5))):
        for n in times:
            for x in mdl.base.states:
                for level in (0, 1):
                    if level == 1 and not mdl.in_small_set(x):
                        continue
                    sm = rm.eval_split_kernel(mdl, n, rm.SplitState(x, level))
                    assert sm.mass.min() >= -1e-12
                    assert sm.total() == pytest.approx(1.0, abs=1e-12)


def test_marginalization_identity(model, staircase_split):
    # summing levels reproduces nu, the base row off the set, the residual on it
    smodel, fam, _ = staircase_split
    nu = smodel.cert.nu.weights
    beta = smodel.cert.beta
    row4 = fam.matrix_at(2)[3]
    off = rm.eval_split_kernel(smodel, 2, rm.SplitState(4, 0))
    assert np.allclose(off.mass.sum(axis=1), row4, atol=1e-14)
    lvl1 = rm.eval_split_kernel(smodel, 2, rm.SplitState(1, 0))
    row1 = fam.matrix_at(2)[0]
    resid = (row1 - beta * nu) / (1 - beta)
    assert np.allclose(lvl1.mass.sum(axis=1), resid, atol=1e-14)
    ring = rm.eval_split_kernel(smodel, 2, rm.SplitState(1, 1))
    assert np.allclose(ring.mass.sum(axis=1), nu, atol=1e-14)


def test_mixture_identity(model):
    # beta * (level-1 row) + (1-beta) * (level-0 row inside) = split of base row
    beta = model.cert.beta
    for n in (-2, 0, 9):
        for x in (1, 2):
            ring = rm.eval_split_kernel(model, n, rm.SplitState(x, 1)).mass
            resid = rm.eval_split_kernel(model, n, rm.SplitState(x, 0)).mass
            base_row = rm.ProbMeasure((1, 2), model.base.matrix_at(n)[model.base.state_index(x)])
            split_base = rm.split_measure(base_row, model.cert, 2.0).mass
            assert np.allclose(beta * ring + (1 - beta) * resid, split_base, atol=1e-14)


def test_model_validation_rejects_bad_certificate(two_state):
    drift = rm.DriftSpec.from_model(two_state)
    bad = rm.DoeblinCertificate(0.9, rm.ProbMeasure((1, 2), np.array([0.5, 0.5])),
                                8.0, (1, 2), window=(-50, 50))
    with pytest.raises(ValueError, match="minorization fails"):
        rm.SplitModel(two_state, bad, drift)


def test_model_validation_rejects_small_set_mismatch(two_state):
    drift = rm.DriftSpec.from_model(two_state)
    cert = rm.DoeblinCertificate(0.25, rm.ProbMeasure((1, 2), np.array([0.5, 0.5])),
                                 8.0, (1,), window=None)
    with pytest.raises(ValueError, match="small set"):
        rm.SplitModel(two_state, cert, drift)


# -- simulation: bell law and cycles ----------------------------------------------


@pytest.fixture(scope="module")
def long_run(model):
    return rm.simulate_split_chain(model, 1, 0, 100_000, seed=42)


def test_bell_law(model, long_run):
    traj, log = long_run
    visits = len(log.sigma)
    assert visits == len(traj)  # the whole space is the small set here
    phat = len(log.tau) / visits
    band = 3.0 * math.sqrt(0.25 * 0.75 / visits)
    assert abs(phat - 0.25) <= band


def test_bell_level_only_on_small_set(staircase_split):
    smodel, _, _ = staircase_split
    traj, log = rm.simulate_split_chain(smodel, 4, 0, 20_000, seed=9)
    on = traj.levels == 1
    in_c = np.isin(traj.states, np.array(smodel.cert.small_set))
    assert np.all(in_c[on])
    off_c = ~in_c
    assert np.all(traj.levels[off_c] == 0)


def test_regeneration_draws_follow_nu(model):
    traj, log = rm.simulate_split_chain(model, 1, 0, 420_000, seed=13)
    rings = log.tau[log.tau < len(traj) - 1]
    assert len(rings) >= 100_000
    nxt = traj.state_indices[rings + 1]
    emp = np.bincount(nxt, minlength=2) / len(nxt)
    assert np.abs(emp - 0.5).sum() < 0.02


def test_cycle_lengths_geometric_quarter(long_run):
    _, log = long_run
    L = log.L.astype(float)
    n = len(L)
    mean_sd = math.sqrt(12.0 / n)
    assert abs(L.mean() - 4.0) <= 3.0 * mean_sd
    # exact 4th central moment of Geometric(1/4) via series, for the var band
    ks = np.arange(1, 3000)
    pmf = (3.0 / 4.0) ** (ks - 1) * 0.25
    mu4 = float(((ks - 4.0) ** 4 * pmf).sum())
    var_sd = math.sqrt((mu4 - 144.0) / n)
    assert abs(L.var(ddof=1) - 12.0) <= 3.0 * var_sd


def test_reproducibility_bit_identical(model):
    t1, l1 = rm.simulate_split_chain(model, 1, 0, 5_000, seed=77)
    t2, l2 = rm.simulate_split_chain(model, 1, 0, 5_000, seed=77)
    assert np.array_equal(t1.states, t2.states)
    assert np.array_equal(t1.levels, t2.levels)
    assert np.array_equal(l1.tau, l2.tau)
    assert t1.uniforms_consumed == 2 * 5_001
    t3, _ = rm.simulate_split_chain(model, 1, 0, 5_000, seed=78)
    assert not np.array_equal(t3.states, t1.states)


def test_start_distribution_consumes_the_same_layout(model):
    mu = rm.ProbMeasure((1, 2), np.array([0.5, 0.5]))
    t1, _ = rm.simulate_split_chain(model, mu, 0, 100, seed=5)
    t2, _ = rm.simulate_split_chain(model, mu, 0, 100, seed=5)
    assert np.array_equal(t1.states, t2.states)
    assert t1.uniforms_consumed == 202


def test_infinite_v_start_rejected(two_state):
    drift = rm.DriftSpec(V=np.array([2.0, np.inf]), gamma=0.5, C=1.0, R=8.0,
                         allow_infinite_v=True)
    cert = rm.DoeblinCertificate(0.1, rm.ProbMeasure((1, 2), np.array([1.0, 0.0])),
                                 8.0, (1,), window=(-20, 20), trusted=True)
    mdl = rm.SplitModel(two_state, cert, drift)
    with pytest.raises(ValueError, match="infinite V"):
        rm.simulate_split_chain(mdl, 2, 0, 10, seed=1)


# -- regeneration log bookkeeping ---------------------------------------------------


def test_log_decomposition_identity(long_run):
    _, log = long_run
    tau0 = int(log.tau[0])
    for n in (tau0, 17, 1_000, 99_999):
        if n < tau0:
            continue
        N = log.N_of_n(n)
        r = log.r_of_n(n)
        assert n == tau0 + log.L[:N].sum() + r
        assert r >= 0
        if N < len(log.L):
            assert r < log.L[N]


def test_log_queries_before_first_regeneration(model):
    _, log = rm.simulate_split_chain(model, 1, 0, 200, seed=3)
    if log.tau[0] > 0:
        with pytest.raises(ValueError, match="precedes"):
            log.N_of_n(int(log.tau[0]) - 1)


# -- marginal consistency --------------------------------------------------------


def test_marginal_consistency_small_gaps(model):
    rep = rm.marginal_consistency(model, 1, 0, 10, 100_000, seed=7)
    assert rep.gaps.shape == (10,)
    assert rep.max_gap < 0.02


def test_marginal_consistency_horizon_zero(model):
    rep = rm.marginal_consistency(model, 1, 0, 0, 1000, seed=7)
    assert rep.gaps.size == 0


def test_marginal_consistency_detects_bell_corruption(model):
    rep = rm.marginal_consistency(model, 1, 0, 10, 100_000, seed=7, bell_beta=0.4)
    assert rep.max_gap > 0.05


# -- cycle independence ------------------------------------------------------------


def test_cycle_sums_uncorrelated(model):
    traj, log = rm.simulate_split_chain(model, 1, 0, 41_000, seed=21)
    assert log.cycle_count() >= 10_000
    g = rm.ObservableG(g=lambda x: float(x), bound=2.0)
    rep = rm.cycle_independence_check(log, traj, g, states=(1, 2))
    assert abs(rep.corr) < 0.03
    assert not rep.flagged


def test_cycle_check_constant_observable_degenerates(model):
    traj, log = rm.simulate_split_chain(model, 1, 0, 5_000, seed=22)
    g = rm.ObservableG(g=lambda x: 1.5, bound=1.5)
    rep = rm.cycle_independence_check(log, traj, g, states=(1, 2))
    assert rep.degenerate
    assert rep.corr == 0.0


def test_cycle_check_needs_cycles(model):
    traj, log = rm.simulate_split_chain(model, 1, 0, 30, seed=23)
    g = rm.ObservableG(g=lambda x: float(x), bound=2.0)
    with pytest.raises(ValueError, match="100"):
        rm.cycle_independence_check(log, traj, g, states=(1, 2))


# -- sampler-backed models ----------------------------------------------------------


def test_sampler_model_requires_residual_machinery(two_state):
    wrapped = rm.SamplerKernelFamily(step=lambda n, x, rng: x, states=(1, 2))
    drift = rm.DriftSpec(V=lambda x: 2.0, gamma=0.5, C=1.0, R=8.0)
    cert = rm.DoeblinCertificate(0.25, None, 8.0, (), trusted=True)
    with pytest.raises(ValueError, match="residual"):
        rm.SplitModel(wrapped, cert, drift, nu_sampler=lambda rng: 1)
    with pytest.raises(ValueError, match="nu_sampler"):
        rm.SplitModel(wrapped, cert, drift)
    with pytest.raises(ValueError, match="trusted"):
        untrusted = rm.DoeblinCertificate(0.25, rm.ProbMeasure((1, 2), np.array([.5, .5])),
                                          8.0, (1, 2))
        rm.SplitModel(wrapped, untrusted, drift, nu_sampler=lambda rng: 1)


def test_sampler_split_chain_matches_finite_law(two_state):
    wrapped = rm.as_sampler(two_state)
    drift = rm.DriftSpec(V=lambda x: 2.0, gamma=0.5, C=1.0, R=8.0)
    cert = rm.DoeblinCertificate(0.25, None, 8.0, (), trusted=True)
    mdl = rm.SplitModel(wrapped, cert, drift,
                        nu_sampler=lambda rng: 1 if rng.random() < 0.5 else 2,
                        nu_density=lambda y: 0.5)
    traj, log = rm.simulate_split_chain(mdl, 1, 0, 20_000, seed=31)
    phat = len(log.tau) / len(traj)
    assert abs(phat - 0.25) <= 4.0 * math.sqrt(0.25 * 0.75 / len(traj))
    rings = log.tau[log.tau < len(traj) - 1]
    nxt = np.array([traj.states[i + 1] for i in rings], dtype=float)
    assert abs((nxt == 1).mean() - 0.5) < 0.05


def test_gaussian_autoregression_split_chain():
    # X' = 0.5 x + N(0,1); V = |x|, R = 4; nu = Uniform[-1, 1] with a tiny
    # hand-checked beta (normal density at |y|+2 over [-1,1] exceeds beta/2)
    def step(n, x, rng):
        return 0.5 * x + rng.normal()

    def density(n, x, y):
        return math.exp(-0.5 * (y - 0.5 * x) ** 2) / math.sqrt(2 * math.pi)

    fam = rm.SamplerKernelFamily(step, dim=1, density=density)
    drift = rm.DriftSpec(V=lambda x: abs(x), gamma=0.5, C=0.8, R=4.0)
    cert = rm.DoeblinCertificate(0.008, None, 4.0, (), trusted=True)
    mdl = rm.SplitModel(fam, cert, drift,
                        nu_sampler=lambda rng: rng.uniform(-1.0, 1.0),
                        nu_density=lambda y: 0.5 if abs(y) <= 1.0 else 0.0)
    traj, log = rm.simulate_split_chain(mdl, 0.0, 0, 30_000, seed=41)
    states = traj.states.astype(float)
    in_c = np.abs(states) <= 4.0
    assert np.all(in_c[traj.levels == 1])
    phat = len(log.tau) / in_c.sum()
    assert abs(phat - 0.008) <= 4.0 * math.sqrt(0.008 * 0.992 / in_c.sum())
    rings = log.tau[log.tau < len(traj) - 1]
    if len(rings) >= 30:
        draws = states[rings + 1]
        assert np.all(np.abs(draws) <= 1.0 + 1e-12)
        assert abs(draws.mean()) <= 4.0 / math.sqrt(12 * len(draws)) + 0.05


# -- batch engine vs single --------------------------------------------------------


def test_batch_single_consistency(model):
    rng = rm.derive_stream(55)
    X, D = simulate_batch(model, 1, 0, 500, 1, rng)
    traj, _ = rm.simulate_split_chain(model, 1, 0, 500, seed=55)
    assert np.array_equal(X[:, 0], traj.state_indices)
    assert np.array_equal(D[:, 0], traj.levels)


# -- exports -----------------------------------------------------------------------


def test_trajectory_and_log_export(model, tmp_path):
    traj, log = rm.simulate_split_chain(model, 1, 0, 50, seed=8)
    tpath = tmp_path / "traj.csv"
    rm.write_trajectory(traj, tpath)
    lines = tpath.read_text().splitlines()
    assert lines[0] == "t,state,level,is_regeneration"
    assert len(lines) == 52
    rpath = tmp_path / "regen.csv"
    rm.write_regeneration_log(log, rpath)
    rlines = rpath.read_text().splitlines()
    assert rlines[0] == "k,tau_k,L_k"
    assert len(rlines) == len(log.tau) + 1
