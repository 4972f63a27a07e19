"""Long-time behaviour diagnostics: decay fits, ultimate bounds, a.s. proxies, Lyapunov audits."""

import math
from dataclasses import dataclass, field

import numpy as np

from .calculus import _k_measure_pairing, generator_apply
from .errors import CapabilityError, InvalidInputError
from .measure import EmpiricalMeasure


@dataclass
class DecayFit:
    alpha: float
    C: float
    r2: float
    n_points: int
    window: tuple


def fit_exponential_decay(times, values, window=None, xi_ms=None):
    """Least-squares line through ``(t, log values)`` on ``window``.

    Parameters
    ----------
    times, values : array_like
        Grid and second-moment estimates.
    window : (float, float), optional
        Fit range; defaults to the last three quarters of the grid.
    xi_ms : float, optional
        Initial second moment used to normalise ``C``; defaults to ``values[0]``.

    Returns
    -------
    DecayFit
        ``alpha = -slope`` and ``C = exp(intercept) / xi_ms``.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise InvalidInputError("times and values must be 1-d arrays of equal length")
    if window is None:
        window = (t[0] + 0.25 * (t[-1] - t[0]), t[-1])
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 2:
        raise InvalidInputError(f"fit window {window} holds fewer than two grid points")
    if np.any(v[sel] <= 0):
        raise InvalidInputError(
            "non-positive second moment inside the fit window; shrink the window"
        )
    xi_ms = float(v[0] if xi_ms is None else xi_ms)
    if not xi_ms > 0:
        raise InvalidInputError("xi_ms must be positive")
    ts, ys = t[sel], np.log(v[sel])
    slope, intercept = np.polyfit(ts, ys, 1)
    resid = ys - (slope * ts + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-slope), float(math.exp(intercept) / xi_ms), r2, int(sel.sum()),
                    (float(window[0]), float(window[1])))


@dataclass
class BoundVerdict:
    passed: bool
    worst_margin: float
    worst_time: float
    slack_se: float


def check_ultimate_boundedness(times, series, M, lam, W, xi_ms, se=None, slack_se=3.0):
    """Check ``series(t) <= M exp(-lam t) xi_ms + W`` at every grid point.

    ``se`` (per-point standard errors) adds ``slack_se * se`` of Monte Carlo slack.
    """
    if min(M, lam, W) < 0:
        raise InvalidInputError("M, lambda and W must be >= 0")
    t = np.asarray(times, dtype=float)
    s = np.asarray(series, dtype=float)
    slack = 0.0 if se is None else slack_se * np.asarray(se, dtype=float)
    margin = M * np.exp(-lam * t) * xi_ms + W + slack - s
    i = int(np.argmin(margin))
    return BoundVerdict(bool(margin[i] >= 0), float(margin[i]), float(t[i]), float(slack_se))


@dataclass
class AsVerdict:
    fraction: float
    threshold: float
    delta: float
    passed: bool


def check_as_stability(paths, delta):
    """Fraction of particles whose tail-window sup of ``|X_t|`` is below ``delta``.

    ``paths`` is either the per-particle tail sup ``(N,)`` or the tail window
    of ``|X_t|`` values ``(n_times, N)``.  Passes when the fraction reaches
    ``1 - 3 / sqrt(N)``.
    """
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    p = np.abs(np.asarray(paths, dtype=float))
    sup = p if p.ndim == 1 else p.max(axis=0)
    n = sup.size
    if n == 0:
        raise InvalidInputError("no paths supplied")
    frac = float(np.mean(sup < delta))
    threshold = 1.0 - 3.0 / math.sqrt(n)
    return AsVerdict(frac, threshold, float(delta), frac >= threshold)


# --------------------------------------------------------------------------
# Lyapunov audits


@dataclass
class LyapunovCheck:
    criterion: str
    form: str
    worst_margin: float
    passed: bool


@dataclass
class LyapunovAudit:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(ch.passed for ch in self.checks)

    def get(self, criterion):
        for ch in self.checks:
            if ch.criterion == criterion:
                return ch
        raise KeyError(criterion)


def snapshot_samples(traj, every=1):
    """``(t, mu)`` pairs from a trajectory's retained snapshots."""
    if traj.snapshots is None:
        raise CapabilityError("trajectory has no retained snapshots")
    steps = traj.snapshot_steps or range(len(traj.snapshots))
    return [(float(traj.times[k]), EmpiricalMeasure(x))
            for k, x in list(zip(steps, traj.snapshots))[::every]]


def _tol(scale):
    return 1e-10 * (1.0 + scale)


def audit_lyapunov_conditions(h, c, alpha, samples, bounds, trajectory=None,
                              jump_mc=None, eta_quad=8, seed=0, k_pairing=None):
    """Audit the Lyapunov conditions on sampled ``(t, mu)`` pairs.

    ``bounds`` selects the form:

    * ``{"a1", "a2"}`` - integrated generator inequality ``<= 0`` with a
      two-sided moment sandwich;
    * additionally ``"N1", "N2", "N3"`` - integrated form with offsets;
    * ``{"gamma1", "gamma2"}`` (callables of ``|x|``) - pointwise generator
      inequality and pointwise sandwich.

    When ``trajectory`` has retained increments the ``K``-pairing condition
    is checked on every step as well; ``k_pairing`` instead supplies a margin
    already collected during the run by a :class:`KPairingMonitor`.  Each check reports its worst margin
    (non-negative means satisfied).
    """
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    pointwise = "gamma1" in bounds or "gamma2" in bounds
    if pointwise and not {"gamma1", "gamma2"} <= set(bounds):
        raise InvalidInputError("pointwise audit needs both gamma1 and gamma2")
    if not pointwise and not {"a1", "a2"} <= set(bounds):
        raise InvalidInputError("integrated audit needs a1 and a2")
    n1 = float(bounds.get("N1", 0.0))
    n2 = float(bounds.get("N2", 0.0))
    n3 = float(bounds.get("N3", 0.0))
    form = "pointwise" if pointwise else "integrated"

    gen_margin = np.inf
    gen_scale = 0.0
    sand_margin = np.inf
    sand_scale = 0.0
    for t, mu in samples:
        mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
        x = mu.points
        v = h.value(t, x, mu)
        integrand = (generator_apply(c, h, t, x, mu, jump_mc, eta_quad, seed)
                     + alpha * v + h.time_derivative(t, x, mu))
        if pointwise:
            gen_margin = min(gen_margin, float(-np.max(integrand)))
            r = np.sqrt(np.sum(x * x, axis=1))
            lo = np.asarray(bounds["gamma1"](r), dtype=float)
            hi = np.asarray(bounds["gamma2"](r), dtype=float)
            sand_margin = min(sand_margin, float(np.min(v - lo)), float(np.min(hi - v)))
        else:
            gen_margin = min(gen_margin, n1 - float(np.mean(integrand)))
            m2 = mu.second_moment
            vbar = float(np.mean(v))
            sand_margin = min(sand_margin, vbar - (bounds["a1"] * m2 - n2),
                              bounds["a2"] * m2 + n3 - vbar)
        gen_scale = max(gen_scale, float(np.max(np.abs(alpha * v))))
        sand_scale = max(sand_scale, float(np.max(np.abs(v))))

    audit = LyapunovAudit()
    audit.checks.append(LyapunovCheck("generator", form, gen_margin, gen_margin >= -_tol(gen_scale)))
    audit.checks.append(LyapunovCheck("sandwich", form, sand_margin, sand_margin >= -_tol(sand_scale)))
    if trajectory is not None or k_pairing is not None:
        m = k_pairing_margin(h, trajectory) if k_pairing is None else float(k_pairing)
        audit.checks.append(LyapunovCheck("k_pairing", "trajectory", m, m >= -1e-12))
    return audit


def k_pairing_margin(h, traj):
    """Minimum over steps and particles of the discrete ``K``-pairing expression."""
    if traj.snapshots is None or traj.dk is None:
        raise CapabilityError("trajectory has no retained increments")
    worst = np.inf
    for k, dk in enumerate(traj.dk):
        worst = min(worst, _pairing(h, float(traj.times[k + 1]), traj.snapshots[k + 1],
                                    traj.epsilon * dk))
    return worst


def _pairing(h, t, x, dk):
    mu = EmpiricalMeasure(x)
    val = np.sum(h.need("dx")(t, x, mu) * dk, axis=1)
    if not h.measure_free:
        val = val + _k_measure_pairing(h, t, x, mu, dk)
    return float(np.min(val))


class KPairingMonitor:
    """Step callback tracking the worst ``K``-pairing value without retaining snapshots."""

    def __init__(self, h, epsilon=1.0):
        self.h = h
        self.epsilon = float(epsilon)
        self.worst = np.inf

    def __call__(self, ens):
        self.worst = min(self.worst, _pairing(self.h, ens.time, ens.states, self.epsilon * ens.last_dk))
