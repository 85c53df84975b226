import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import regenmc as rm
from regenmc.kernels import Waveform


def a_of(n):
    return 1.0 / 3.0 + math.sin(n) / 6.0


def b_of(n):
    return 1.0 / 4.0 + math.cos(n) / 8.0


@pytest.fixture(scope="module")
def two_state():
    return rm.builtin_model("two_state_sinusoid")


@pytest.fixture(scope="module")
def three_state():
    return rm.builtin_model("three_state_cycle")


# -- one-step rows -----------------------------------------------------------


def test_step_row_into_time_zero(two_state):
    # sin 0 = 0 and cos 0 = 1 make the step into time 0 exactly rational
    assert rm.eval_step_kernel(two_state, -1, 1).weights == pytest.approx(
        [2.0 / 3.0, 1.0 / 3.0], abs=1e-15)
    assert rm.eval_step_kernel(two_state, -1, 2).weights == pytest.approx(
        [3.0 / 8.0, 5.0 / 8.0], abs=1e-15)


def test_step_row_into_time_one(two_state):
    a1 = a_of(1)
    assert rm.eval_step_kernel(two_state, 0, 1).weights == pytest.approx(
        [1.0 - a1, a1], abs=1e-12)
    assert rm.eval_step_kernel(two_state, 0, 1).weights[0] == pytest.approx(
        0.5264215025320173, abs=1e-12)


def test_eval_unknown_state(two_state):
    with pytest.raises(ValueError, match="unknown state"):
        rm.eval_step_kernel(two_state, 0, 7)


def test_eval_outside_window_errors():
    fam = rm.FiniteKernelFamily((1, 2), matrices={0: [[0.5, 0.5], [0.5, 0.5]]})
    with pytest.raises(ValueError, match="window"):
        rm.eval_step_kernel(fam, 3, 1)


# -- composition -------------------------------------------------------------


def test_compose_identity_at_equal_times(two_state):
    assert np.array_equal(rm.compose_interval(two_state, 5, 5), np.eye(2))


def test_compose_one_step(two_state):
    M = rm.compose_interval(two_state, -1, 0)
    assert M[0] == pytest.approx([2.0 / 3.0, 1.0 / 3.0], abs=1e-15)
    assert M[1] == pytest.approx([3.0 / 8.0, 5.0 / 8.0], abs=1e-15)


def test_compose_two_steps_hand_product(two_state):
    # multiply the two step matrices entry by entry with scalar arithmetic
    am1, bm1 = a_of(-1), b_of(-1)
    a0, b0 = a_of(0), b_of(0)
    p = [[1 - am1, am1], [bm1, 1 - bm1]]
    q = [[1 - a0, a0], [b0, 1 - b0]]
    expected = [
        [p[0][0] * q[0][0] + p[0][1] * q[1][0], p[0][0] * q[0][1] + p[0][1] * q[1][1]],
        [p[1][0] * q[0][0] + p[1][1] * q[1][0], p[1][0] * q[0][1] + p[1][1] * q[1][1]],
    ]
    M = rm.compose_interval(two_state, -2, 0)
    assert np.allclose(M, expected, atol=1e-14, rtol=0)
    assert M.sum(axis=1) == pytest.approx([1.0, 1.0], abs=1e-12)


def test_compose_rejects_reversed_interval(two_state):
    with pytest.raises(ValueError, match="m <= n"):
        rm.compose_interval(two_state, 3, 1)


def test_compose_rejects_sampler(two_state):
    wrapped = rm.as_sampler(two_state)
    with pytest.raises(ValueError, match="finite"):
        rm.compose_interval(wrapped, 0, 2)


@given(m=st.integers(-20, 20), dk=st.integers(0, 6), dn=st.integers(0, 6))
@settings(max_examples=40, deadline=None)
def test_chapman_kolmogorov(m, dk, dn):
    fam = rm.builtin_model("two_state_sinusoid")
    k, n = m + dk, m + dk + dn
    left = rm.compose_interval(fam, m, n)
    right = rm.compose_interval(fam, m, k) @ rm.compose_interval(fam, k, n)
    assert np.abs(left - right).max() < 1e-10
    assert np.abs(left.sum(axis=1) - 1.0).max() < 1e-10


# -- pushforward and semigroup ----------------------------------------------


def test_pushforward_point_identity(two_state):
    eps1 = rm.ProbMeasure.point_mass((1, 2), 1)
    out = rm.pushforward(two_state, 4, 4, eps1)
    assert out.weights == pytest.approx([1.0, 0.0], abs=0)


def test_pushforward_worked_rows(two_state):
    eps1 = rm.ProbMeasure.point_mass((1, 2), 1)
    assert rm.pushforward(two_state, -1, 0, eps1).weights == pytest.approx(
        [2.0 / 3.0, 1.0 / 3.0], abs=1e-15)
    half = rm.ProbMeasure((1, 2), np.array([0.5, 0.5]))
    assert rm.pushforward(two_state, -1, 0, half).weights == pytest.approx(
        [25.0 / 48.0, 23.0 / 48.0], abs=1e-15)


def test_pushforward_dimension_mismatch(two_state):
    bad = rm.ProbMeasure((1, 2, 3), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError, match="state list"):
        rm.pushforward(two_state, 0, 1, bad)


def test_pushforward_preserves_constant_integral(two_state):
    mu = rm.ProbMeasure((1, 2), np.array([0.3, 0.7]))
    out = rm.pushforward(two_state, 0, 13, mu)
    const = np.array([2.5, 2.5])
    assert out.integrate(const) == pytest.approx(mu.integrate(const), abs=1e-12)


def test_semigroup_constant_and_identity(two_state):
    ones = rm.semigroup_apply(two_state, 2, 9, np.array([1.0, 1.0]))
    assert ones == pytest.approx([1.0, 1.0], abs=1e-12)
    f = np.array([0.3, -1.2])
    assert rm.semigroup_apply(two_state, 5, 5, f) == pytest.approx(f, abs=0)


def test_semigroup_worked_example(two_state):
    g = rm.ObservableG(g=lambda x: float(x), bound=2.0)
    out = rm.semigroup_apply(two_state, -1, 0, g)
    assert out == pytest.approx([4.0 / 3.0, 13.0 / 8.0], abs=1e-14)


# -- total variation ---------------------------------------------------------


def brute_force_tv(w1, w2):
    """sup_A (mu-nu)(A) - inf_A (mu-nu)(A) by enumerating all events."""
    diff = np.asarray(w1) - np.asarray(w2)
    masses = [sum(diff[list(A)]) for r in range(len(diff) + 1)
              for A in itertools.combinations(range(len(diff)), r)]
    return max(masses) - min(masses)


def test_tv_point_masses():
    e1 = rm.ProbMeasure.point_mass((1, 2), 1)
    e2 = rm.ProbMeasure.point_mass((1, 2), 2)
    assert rm.tv_distance(e1, e2) == 2.0
    assert rm.tv_distance(e1, e1) == 0.0


def test_tv_matches_event_enumeration():
    w1, w2 = [0.75, 0.25], [0.25, 0.75]
    assert rm.tv_distance(np.array(w1), np.array(w2)) == pytest.approx(
        brute_force_tv(w1, w2), abs=1e-15)
    assert rm.tv_distance(np.array(w1), np.array(w2)) == 1.0


@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=5), st.data())
@settings(max_examples=50, deadline=None)
def test_tv_is_a_metric(raw, data):
    n = len(raw)
    w1 = np.array(raw) / sum(raw)
    raw2 = data.draw(st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n))
    raw3 = data.draw(st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n))
    w2 = np.array(raw2) / sum(raw2)
    w3 = np.array(raw3) / sum(raw3)
    d12, d13, d23 = (rm.tv_distance(a, b) for a, b in ((w1, w2), (w1, w3), (w2, w3)))
    assert d12 == rm.tv_distance(w2, w1)
    assert d13 <= d12 + d23 + 1e-12
    assert rm.tv_distance(w1, w1) == 0.0
    assert (d12 == 0.0) == bool(np.allclose(w1, w2, atol=0))
    assert brute_force_tv(w1, w2) == pytest.approx(d12, abs=1e-12)


def test_tv_dimension_mismatch():
    with pytest.raises(ValueError):
        rm.tv_distance(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


# -- weighted norm ------------------------------------------------------------


def test_weighted_norm_examples():
    assert rm.weighted_norm(np.zeros(3), np.ones(3)) == 0.0
    assert rm.weighted_norm(np.array([3.0, 3.0]), np.array([2.0, 2.0])) == 1.0
    assert rm.weighted_norm(np.array([1.0, 4.0]), np.array([0.0, 1.0])) == 2.0


def test_weighted_norm_rejects_negative_v():
    with pytest.raises(ValueError, match="nonnegative"):
        rm.weighted_norm(np.ones(2), np.array([1.0, -0.5]))


# -- built-in models ----------------------------------------------------------


def test_two_state_coefficient_bounds(two_state):
    for n in range(-500, 500):
        M = two_state.matrix_at(n - 1)
        a, b = M[0, 1], M[1, 0]
        assert 1.0 / 6.0 <= a <= 0.5
        assert 1.0 / 8.0 <= b <= 3.0 / 8.0


def test_three_state_rows(three_state):
    M = three_state.matrix_at(0)
    assert M.sum(axis=1) == pytest.approx([1, 1, 1], abs=0)
    r1 = rm.ProbMeasure((1, 2, 3), M[0])
    r2 = rm.ProbMeasure((1, 2, 3), M[1])
    assert rm.tv_distance(r1, r2) == 1.0


def test_unknown_model_name():
    with pytest.raises(ValueError, match="unknown model"):
        rm.builtin_model("four_state_cycle")


# -- sampler wrapper ----------------------------------------------------------


def test_sampler_eval_converges_to_exact_row(two_state):
    wrapped = rm.as_sampler(two_state)
    rng = rm.derive_stream(2024)
    emp = rm.eval_step_kernel(wrapped, -1, 1, n_samples=100_000, rng=rng)
    assert emp.kind == "empirical"
    assert emp.n_samples == 100_000
    exact = rm.eval_step_kernel(two_state, -1, 1)
    assert rm.tv_distance(emp, exact) < 0.02


def test_sampler_requires_count_and_rng(two_state):
    wrapped = rm.as_sampler(two_state)
    with pytest.raises(ValueError, match="n_samples"):
        rm.eval_step_kernel(wrapped, 0, 1)


# -- measures ------------------------------------------------------------------


def test_prob_measure_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        rm.ProbMeasure((1, 2), np.array([1.2, -0.2]))
    with pytest.raises(ValueError, match="sum"):
        rm.ProbMeasure((1, 2), np.array([0.6, 0.6]))
    with pytest.raises(ValueError, match="sample count"):
        rm.ProbMeasure((1, 2), np.array([0.5, 0.5]), kind="empirical")


def test_observable_bound_enforced():
    g = rm.ObservableG(g=lambda x: float(x), bound=1.5)
    with pytest.raises(ValueError, match="bound"):
        g.values((1, 2))


# -- waveform validation -------------------------------------------------------


def test_waveform_validation():
    with pytest.raises(ValueError, match="zero amplitude"):
        Waveform("const", 0.5, 0.1)
    with pytest.raises(ValueError, match="unknown waveform"):
        Waveform("tan", 0.5)
    with pytest.raises(ValueError, match="sum to 1"):
        rm.FiniteKernelFamily((1, 2), entries=[
            [Waveform("const", 0.6), Waveform("const", 0.6)],
            [Waveform("const", 0.5), Waveform("const", 0.5)],
        ])
    with pytest.raises(ValueError, match="cancel"):
        rm.FiniteKernelFamily((1, 2), entries=[
            [Waveform("sin", 0.5, 0.1), Waveform("const", 0.5)],
            [Waveform("const", 0.5), Waveform("const", 0.5)],
        ])
    with pytest.raises(ValueError, match="negative"):
        rm.FiniteKernelFamily((1, 2), entries=[
            [Waveform("sin", 0.1, 0.2), Waveform("sin", 0.9, -0.2)],
            [Waveform("const", 0.5), Waveform("const", 0.5)],
        ])


# -- model config files ---------------------------------------------------------


def test_waveform_config_roundtrip(two_state, tmp_path):
    doc = two_state.to_dict()
    path = tmp_path / "model.json"
    path.write_text(__import__("json").dumps(doc))
    loaded = rm.load_model(path)
    for n in (-3, 0, 11):
        assert np.allclose(loaded.matrix_at(n), two_state.matrix_at(n), atol=0)
    assert loaded.content_hash() == two_state.content_hash()


def test_explicit_config_window():
    mats = {k: [[0.5, 0.5], [0.2, 0.8]] for k in range(-2, 3)}
    fam = rm.load_model({"states": [1, 2], "kind": "explicit",
                         "window": [-2, 2], "matrices": {str(k): m for k, m in mats.items()}})
    assert fam.window == (-2, 2)
    assert np.allclose(fam.matrix_at(0), [[0.5, 0.5], [0.2, 0.8]])
    with pytest.raises(ValueError, match="window"):
        fam.matrix_at(3)


def test_config_rejects_bad_rows():
    with pytest.raises(ValueError, match="sum to 1"):
        rm.load_model({"states": [1, 2], "kind": "explicit",
                       "matrices": {"0": [[0.7, 0.7], [0.5, 0.5]]}})
    with pytest.raises(ValueError, match="kind"):
        rm.load_model({"states": [1, 2], "kind": "closed_form"})
