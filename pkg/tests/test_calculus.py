import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsde import calculus
from mvsde.calculus import (
    LyapunovFunction,
    bihari_bound,
    generator_apply,
    generator_terms,
    ito_residual,
)
from mvsde.coefficients import Modulus, build_coefficients
from mvsde.errors import CapabilityError, InvalidInputError
from mvsde.measure import EmpiricalMeasure
from mvsde.monotone import Halfspace, NormalCone, Zero
from mvsde.noise import JumpLaw
from mvsde.solver import SolverConfig, simulate

CATALOG = ["constant", "quadratic", "measure_quadratic", "squared_mean", "exp_weighted"]


def make(name):
    return calculus.test_function(name, alpha=0.7) if name == "exp_weighted" else calculus.test_function(name)


def sample(n=6, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), EmpiricalMeasure(rng.standard_normal((9, dim)) + 0.5)


@pytest.mark.parametrize("name", CATALOG)
def test_dx_and_dxx_match_finite_differences(name):
    h = make(name)
    x, mu = sample()
    t, e = 0.3, 1e-6
    g = h.dx(t, x, mu)
    hess = h.dxx(t, x, mu)
    for j in range(x.shape[1]):
        step = np.zeros_like(x)
        step[:, j] = e
        fd = (h.value(t, x + step, mu) - h.value(t, x - step, mu)) / (2 * e)
        assert np.allclose(g[:, j], fd, rtol=1e-5, atol=1e-8)
        fd2 = (h.dx(t, x + step, mu) - h.dx(t, x - step, mu)) / (2 * e)
        assert np.allclose(hess[:, :, j], fd2, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("name", ["measure_quadratic", "squared_mean"])
def test_measure_derivative_matches_particle_perturbation(name):
    # moving particle k of an N-point measure by e changes h by (e / N) * dmu(y_k)
    h = make(name)
    x, mu = sample()
    y = mu.points
    n = y.shape[0]
    t, e = 0.0, 1e-6
    dmu = h.dmu(t, x, mu, y)
    for k in (0, 4):
        for j in range(y.shape[1]):
            up, down = y.copy(), y.copy()
            up[k, j] += e
            down[k, j] -= e
            fd = (h.value(t, x, EmpiricalMeasure(up)) - h.value(t, x, EmpiricalMeasure(down))) / (2 * e)
            assert np.allclose(fd * n, dmu[k, j], rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("name", ["measure_quadratic", "squared_mean"])
def test_y_derivative_of_measure_derivative(name):
    h = make(name)
    x, mu = sample()
    y = mu.points
    e = 1e-6
    hess = h.dy_dmu(0.0, x, mu, y)
    for j in range(y.shape[1]):
        step = np.zeros_like(y)
        step[:, j] = e
        fd = (h.dmu(0.0, x, mu, y + step) - h.dmu(0.0, x, mu, y - step)) / (2 * e)
        assert np.allclose(hess[:, :, j], fd, rtol=1e-5, atol=1e-8)


def test_unknown_test_function():
    with pytest.raises(InvalidInputError, match="valid"):
        calculus.test_function("cubic")


def test_missing_callback_raises_capability_error():
    h = LyapunovFunction("bare", value=lambda t, x, mu: np.zeros(x.shape[0]))
    c = build_coefficients("linear_mean_field", {"a": 1.0})[0]
    x, mu = sample(dim=1)
    with pytest.raises(CapabilityError):
        generator_apply(c, h, 0.0, x, mu)


def ou_with_jumps():
    law = JumpLaw(1.5, 1.0)
    return build_coefficients("linear_mean_field", {"a": 1.2, "c": 0.4, "sigma": 0.6, "jump_scale": 0.3},
                              law=law)[0]


def test_generator_quadratic_closed_form():
    c = ou_with_jumps()
    x, mu = sample(dim=1)
    m = mu.mean[0]
    expected = 2 * x[:, 0] * (-1.2 * x[:, 0] + 0.4 * m) + 0.36 + 1.5 * 0.09 / 3
    got = generator_apply(c, make("quadratic"), 0.0, x, mu, jump_mc=None)
    assert np.allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_generator_measure_quadratic_closed_form():
    c = ou_with_jumps()
    x, mu = sample(dim=1)
    y = mu.points[:, 0]
    m = y.mean()
    local = 0.36 + 1.5 * 0.09 / 3
    expected = (2 * x[:, 0] * (-1.2 * x[:, 0] + 0.4 * m) + local
                + np.mean(2 * y * (-1.2 * y + 0.4 * m)) + local)
    terms = generator_terms(c, make("measure_quadratic"), 0.0, x, mu, jump_mc=None)
    assert np.allclose(sum(terms.values()), expected, rtol=1e-12)
    assert np.allclose(terms["measure_jump"], 1.5 * 0.09 / 3, rtol=1e-12)
    assert np.allclose(terms["measure_diffusion"], 0.36, rtol=1e-12)


def test_generator_single_point_returns_float():
    c = ou_with_jumps()
    _, mu = sample(dim=1)
    val = generator_apply(c, make("quadratic"), 0.0, np.array([0.5]), mu, jump_mc=None)
    assert isinstance(val, float)


@pytest.mark.parametrize("pair", [("quadratic", "measure_quadratic"), ("measure_quadratic", "squared_mean"),
                                  ("constant", "exp_weighted"), ("squared_mean", "quadratic")])
def test_generator_additive(pair):
    c = ou_with_jumps()
    h1, h2 = make(pair[0]), make(pair[1])
    x, mu = sample(dim=1)
    a = generator_apply(c, h1, 0.4, x, mu, jump_mc=300, seed=3)
    b = generator_apply(c, h2, 0.4, x, mu, jump_mc=300, seed=3)
    both = generator_apply(c, h1 + h2, 0.4, x, mu, jump_mc=300, seed=3)
    assert np.allclose(both, a + b, rtol=0, atol=1e-10 * (1 + np.max(np.abs(a + b))))


def test_time_only_function_has_zero_generator():
    alpha = 0.8
    h = LyapunovFunction(
        "exp_t",
        value=lambda t, x, mu: np.full(x.shape[0], math.exp(alpha * t)),
        dt=lambda t, x, mu: np.full(x.shape[0], alpha * math.exp(alpha * t)),
        dx=lambda t, x, mu: np.zeros_like(x),
        dxx=lambda t, x, mu: np.zeros(x.shape + (x.shape[1],)),
    )
    c = ou_with_jumps()
    x, mu = sample(dim=1)
    assert np.all(generator_apply(c, h, 1.0, x, mu, jump_mc=None) == 0)
    assert np.allclose(h.time_derivative(1.0, x, mu), alpha * h.value(1.0, x, mu))


def test_jump_mc_converges_to_quadrature():
    c = ou_with_jumps()
    x, mu = sample(dim=1)
    h = make("measure_quadratic")
    exact = generator_apply(c, h, 0.0, x, mu, jump_mc=None)
    mc = generator_apply(c, h, 0.0, x, mu, jump_mc=20_000, seed=1)
    assert np.allclose(mc, exact, atol=2e-3)


@pytest.mark.parametrize("name", ["measure_quadratic", "exp_weighted"])
def test_ito_residual_vanishes_with_step(name):
    law = JumpLaw(1.0, 1.0)
    c = build_coefficients("linear_mean_field", {"a": 1.0, "c": 0.5, "jump_scale": 0.1}, law=law)[0]
    h = make(name)
    res = []
    for step in (0.02, 0.01):
        rec = simulate(SolverConfig(2000, step, 1.0, seed=5, retain_snapshots=True), c, Zero(1), 1.0)
        r = ito_residual(rec, h, c)
        assert r.residual[0] == 0.0
        res.append(r.terminal)
    assert abs(res[1][0]) < abs(res[0][0])
    assert abs(res[1][2]) <= 4


def test_ito_residual_deterministic_drift_is_first_order():
    c = build_coefficients("linear_mean_field", {"a": 1.0})[0]
    h = make("quadratic")
    rs = []
    for step in (0.01, 0.005):
        rec = simulate(SolverConfig(1, step, 1.0, retain_snapshots=True), c, Zero(1), 1.0)
        rs.append(ito_residual(rec, h, c).terminal[0])
    assert 1.8 <= rs[0] / rs[1] <= 2.2


def test_ito_residual_accounts_for_reflection():
    c = build_coefficients("linear_mean_field", {"a": -1.0})[0]
    h = make("quadratic")
    cs = Halfspace([-1.0], -0.5)
    rec = simulate(SolverConfig(1, 0.001, 1.0, retain_snapshots=True), c, NormalCone(cs), 0.3)
    r = ito_residual(rec, h, c)
    assert rec.final.states[0, 0] == pytest.approx(0.5)
    # without the K pairing the residual would carry the full reflection work
    assert abs(r.terminal[0]) < 5e-3


def test_ito_residual_needs_snapshots():
    c = build_coefficients("linear_mean_field")[0]
    rec = simulate(SolverConfig(2, 0.1, 0.2), c, Zero(1), 1.0)
    with pytest.raises(CapabilityError):
        ito_residual(rec, make("quadratic"), c)


# --- Bihari envelope -------------------------------------------------------


def rk4(rhs, y0, t_grid, dt):
    out, y, t = [], y0, 0.0
    for target in t_grid:
        while t < target - 1e-15:
            s = min(dt, target - t)
            k1 = rhs(t, y)
            k2 = rhs(t + s / 2, y + s / 2 * k1)
            k3 = rhs(t + s / 2, y + s / 2 * k2)
            k4 = rhs(t + s, y + s * k3)
            y += s / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += s
        out.append(y)
    return np.array(out)


def test_gronwall_exactness():
    t = np.linspace(0, 3, 31)
    v = lambda s: 1.0 + np.sin(s) ** 2  # noqa: E731
    bound = bihari_bound(0.5, v, Modulus("linear", 1.0), t)
    cum = t + 0.5 * t - np.sin(2 * t) / 4
    assert np.allclose(bound.bound, 0.5 * np.exp(cum), rtol=1e-8, atol=0)
    assert np.all(bound.in_domain)


def test_gronwall_constant_rate_and_slope():
    t = np.linspace(0, 2, 11)
    bound = bihari_bound(2.0, 1.5, Modulus("linear", 2.0), t)
    assert np.allclose(bound.bound, 2.0 * np.exp(3.0 * t), rtol=1e-8)


@pytest.mark.parametrize("m", [Modulus("log", delta=0.1), Modulus("loglog", delta=0.05)])
def test_bihari_matches_rk4(m):
    t = np.linspace(0, 2, 21)
    v = lambda s: 1.0 + 0.5 * s  # noqa: E731
    bound = bihari_bound(0.01, v, m, t)
    ode = rk4(lambda s, u: v(s) * float(m(u)), 0.01, t, 1e-3)
    assert np.allclose(bound.bound, ode, rtol=1e-4)


def test_bihari_superlinear_leaves_domain():
    # u' = u^2, u(0) = 0.5 blows up at t = 2
    t = np.array([0.0, 1.0, 1.9, 2.5])
    bound = bihari_bound(0.5, 1.0, lambda s: s * s, t)
    assert np.allclose(bound.bound[:3], 0.5 / (1 - 0.5 * t[:3]), rtol=1e-8)
    assert list(bound.in_domain) == [True, True, True, False]
    assert bound.bound[3] == np.inf


def test_bihari_zero_start_uses_floor():
    bound = bihari_bound(0.0, 1.0, lambda s: np.ones_like(s), np.array([0.0, 1.0]))
    assert bound.bound[1] == pytest.approx(1.0 + 1e-12, rel=1e-12)


@settings(max_examples=8, deadline=None)
@given(c0=st.floats(1e-6, 10.0), extra=st.floats(1e-3, 5.0), rate=st.floats(0.0, 3.0))
def test_bihari_monotone_in_time_and_start(c0, extra, rate):
    t = np.linspace(0, 2, 9)
    m = Modulus("log", delta=0.2)
    lo = bihari_bound(c0, rate, m, t).bound
    hi = bihari_bound(c0 + extra, rate, m, t).bound
    assert np.all(np.diff(lo) >= 0)
    assert np.all(hi >= lo)


def test_bihari_validation():
    t = np.array([0.0, 1.0])
    with pytest.raises(InvalidInputError):
        bihari_bound(-1.0, 1.0, Modulus(), t)
    with pytest.raises(InvalidInputError):
        bihari_bound(1.0, -1.0, Modulus(), t)
    with pytest.raises(InvalidInputError):
        bihari_bound(1.0, 1.0, Modulus(), np.array([1.0, 0.0]))
    with pytest.raises(InvalidInputError):
        bihari_bound(1.0, 1.0, lambda s: -np.ones_like(s), t)
