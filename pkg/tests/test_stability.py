import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsde import calculus
from mvsde.coefficients import build_coefficients
from mvsde.errors import CapabilityError, InvalidInputError
from mvsde.monotone import Zero
from mvsde.solver import SolverConfig, simulate
from mvsde.stability import (
    KPairingMonitor,
    audit_lyapunov_conditions,
    check_as_stability,
    check_ultimate_boundedness,
    fit_exponential_decay,
    k_pairing_margin,
    snapshot_samples,
)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.05, 5.0), C=st.floats(0.1, 10.0), xi=st.floats(0.1, 10.0))
def test_decay_fit_recovers_exact_exponential(alpha, C, xi):
    t = np.linspace(0, 4, 81)
    fit = fit_exponential_decay(t, C * xi * np.exp(-alpha * t), xi_ms=xi)
    assert fit.alpha == pytest.approx(alpha, rel=1e-10)
    assert fit.C == pytest.approx(C, rel=1e-10)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_decay_fit_default_window():
    t = np.linspace(0, 8, 9)
    fit = fit_exponential_decay(t, np.exp(-t))
    assert fit.window == (2.0, 8.0)
    assert fit.n_points == 7


def test_decay_fit_rejects_non_positive_values():
    t = np.linspace(0, 1, 5)
    with pytest.raises(InvalidInputError, match="shrink the window"):
        fit_exponential_decay(t, np.array([1.0, 0.5, 0.0, 0.1, 0.1]), window=(0.0, 1.0))
    with pytest.raises(InvalidInputError):
        fit_exponential_decay(t, np.ones(5), window=(0.9, 0.95))


def test_ultimate_bound_margin_and_slack():
    t = np.linspace(0, 5, 51)
    series = 0.125 + 0.875 * np.exp(-2 * t)
    ok = check_ultimate_boundedness(t, series, 1.0, 2.0, 0.14, 1.0)
    assert ok.passed and ok.worst_margin == pytest.approx(0.015 + 0.125 * math.exp(-10), rel=1e-12)
    tight = check_ultimate_boundedness(t, series + 0.02, 1.0, 2.0, 0.14, 1.0)
    assert not tight.passed
    rescued = check_ultimate_boundedness(t, series + 0.02, 1.0, 2.0, 0.14, 1.0, se=np.full(51, 0.01))
    assert rescued.passed
    with pytest.raises(InvalidInputError):
        check_ultimate_boundedness(t, series, 1.0, -2.0, 0.1, 1.0)


@settings(max_examples=100, deadline=None)
@given(w=st.floats(0.0, 1.0), extra=st.floats(0.0, 1.0), shift=st.floats(-0.5, 0.5))
def test_ultimate_bound_monotone_in_w(w, extra, shift):
    t = np.linspace(0, 3, 31)
    series = 0.3 + shift * np.exp(-t)
    if check_ultimate_boundedness(t, series, 1.0, 1.0, w, 1.0).passed:
        assert check_ultimate_boundedness(t, series, 1.0, 1.0, w + extra, 1.0).passed


def test_as_proxy_fraction_and_threshold():
    sup = np.concatenate([np.full(990, 1e-5), np.full(10, 1.0)])
    v = check_as_stability(sup, 1e-3)
    assert v.fraction == pytest.approx(0.99)
    assert v.threshold == pytest.approx(1 - 3 / math.sqrt(1000))
    assert v.passed
    window = np.abs(np.random.default_rng(0).standard_normal((5, 100)))
    assert check_as_stability(window, 10.0).fraction == 1.0
    assert not check_as_stability(window, 1e-3).passed
    with pytest.raises(InvalidInputError):
        check_as_stability(sup, 0.0)


def contractive_run(sigma=0.0, horizon=2.0, stride=1):
    c = build_coefficients("linear_mean_field", {"a": 1.0, "c": 0.25, "sigma": sigma})[0]
    cfg = SolverConfig(400, 0.01, horizon, seed=1, retain_snapshots=True, snapshot_stride=stride)
    return c, simulate(cfg, c, Zero(1), {"kind": "gaussian", "mean": 1.0, "std": 0.5})


def test_lyapunov_audit_integrated_form_on_contractive_ou():
    c, rec = contractive_run()
    h = calculus.test_function("quadratic")
    audit = audit_lyapunov_conditions(h, c, 1.5, snapshot_samples(rec, every=10),
                                      {"a1": 1.0, "a2": 1.0}, trajectory=rec)
    assert audit.passed
    assert [ch.criterion for ch in audit.checks] == ["generator", "sandwich", "k_pairing"]
    too_fast = audit_lyapunov_conditions(h, c, 3.0, snapshot_samples(rec, every=10), {"a1": 1.0, "a2": 1.0})
    assert not too_fast.get("generator").passed


def test_lyapunov_audit_implies_envelope():
    c, rec = contractive_run()
    h = calculus.test_function("quadratic")
    audit = audit_lyapunov_conditions(h, c, 1.5, snapshot_samples(rec, every=20), {"a1": 1.0, "a2": 1.0})
    assert audit.passed
    envelope = np.exp(-1.5 * rec.times) * rec.mean_sq[0] + 3 * rec.mean_sq_se
    assert np.all(rec.mean_sq <= envelope)


def test_lyapunov_audit_pointwise_form():
    c, rec = contractive_run()
    h = calculus.test_function("quadratic")
    bounds = {"gamma1": lambda r: 0.5 * r**2, "gamma2": lambda r: 2.0 * r**2}
    samples = snapshot_samples(rec, every=50)
    audit = audit_lyapunov_conditions(h, c, 1.0, samples, bounds)
    assert audit.get("sandwich").passed and audit.get("sandwich").form == "pointwise"
    integrated = audit_lyapunov_conditions(h, c, 1.0, samples, {"a1": 1.0, "a2": 1.0})
    # a pointwise bound is never weaker than its particle average
    assert audit.get("generator").worst_margin <= integrated.get("generator").worst_margin
    tight = {"gamma1": lambda r: 1.5 * r**2, "gamma2": lambda r: 2.0 * r**2}
    assert not audit_lyapunov_conditions(h, c, 1.0, samples, tight).get("sandwich").passed


def test_lyapunov_offsets_absorb_noise():
    c, rec = contractive_run(sigma=0.5)
    h = calculus.test_function("quadratic")
    samples = snapshot_samples(rec, every=20)
    plain = audit_lyapunov_conditions(h, c, 1.0, samples, {"a1": 1.0, "a2": 1.0})
    offset = audit_lyapunov_conditions(h, c, 1.0, samples, {"a1": 1.0, "a2": 1.0, "N1": 0.25})
    assert not plain.get("generator").passed
    assert offset.get("generator").passed


def test_lyapunov_audit_bound_validation():
    c, rec = contractive_run(horizon=0.1)
    h = calculus.test_function("quadratic")
    samples = snapshot_samples(rec)
    with pytest.raises(InvalidInputError):
        audit_lyapunov_conditions(h, c, 1.0, samples, {"a1": 1.0})
    with pytest.raises(InvalidInputError):
        audit_lyapunov_conditions(h, c, 1.0, samples, {"gamma1": lambda r: r})
    with pytest.raises(InvalidInputError):
        audit_lyapunov_conditions(h, c, 0.0, samples, {"a1": 1.0, "a2": 1.0})


def test_k_pairing_monitor_matches_retained_pairing():
    from mvsde.monotone import Halfspace, NormalCone

    c = build_coefficients("linear_mean_field", {"a": -0.5, "sigma": 1.0})[0]
    op = NormalCone(Halfspace([-1.0], -1.0))
    h = calculus.test_function("measure_quadratic")
    cfg = SolverConfig(100, 0.01, 1.0, seed=2, retain_snapshots=True, epsilon=0.5)
    mon = KPairingMonitor(h, cfg.epsilon)
    rec = simulate(cfg, c, op, 0.5, on_step=mon)
    assert mon.worst == k_pairing_margin(h, rec)
    assert mon.worst >= -1e-12


def test_snapshot_requirements():
    c = build_coefficients("linear_mean_field")[0]
    rec = simulate(SolverConfig(2, 0.1, 0.2), c, Zero(1), 1.0)
    with pytest.raises(CapabilityError):
        snapshot_samples(rec)
    with pytest.raises(CapabilityError):
        k_pairing_margin(calculus.test_function("quadratic"), rec)
    _, strided = contractive_run(horizon=1.0, stride=25)
    assert [t for t, _ in snapshot_samples(strided)] == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
