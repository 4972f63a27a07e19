"""Mean-field generator, Ito-identity residuals and Bihari envelopes.

Test functions ``h(t, x, mu)`` carry analytic derivatives; nothing here
differentiates numerically.  Callback shapes, for ``x`` and ``y`` of shape
``(n, d)`` (rows paired):

* ``value(t, x, mu)``, ``dt(t, x, mu)`` -> ``(n,)``
* ``dx(t, x, mu)`` -> ``(n, d)``, ``dxx(t, x, mu)`` -> ``(n, d, d)``
* ``dmu(t, x, mu, y)`` -> ``(n, d)``, the measure derivative at ``y``
* ``dy_dmu(t, x, mu, y)`` -> ``(n, d, d)``
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .errors import CapabilityError, InvalidInputError
from .measure import EmpiricalMeasure

ETA_NODES = 8


@dataclass(frozen=True)
class LyapunovFunction:
    """A test function with analytic derivatives.

    ``measure_free`` marks functions that do not depend on ``mu``; their
    measure derivatives are zero and need not be supplied.  ``dmu_x_free``
    declares that the measure derivative does not depend on ``x``, which lets
    measure integrals be computed once per ensemble instead of once per row.
    """

    name: str
    value: object
    dt: object = None
    dx: object = None
    dxx: object = None
    dmu: object = None
    dy_dmu: object = None
    measure_free: bool = True
    dmu_x_free: bool = False

    def need(self, attr):
        fn = getattr(self, attr)
        if fn is None:
            raise CapabilityError(f"test function {self.name!r} has no {attr} callback")
        return fn

    def time_derivative(self, t, x, mu):
        if self.dt is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.dt(t, x, mu), dtype=float)

    def __add__(self, other):
        def plus(attr, zero):
            fa, fb = getattr(self, attr), getattr(other, attr)
            if fa is None and fb is None:
                return None
            fa = fa or zero
            fb = fb or zero
            return lambda *args: fa(*args) + fb(*args)

        def zero_vec(t, x, mu, y=None):
            return np.zeros_like(x)

        def zero_mat(t, x, mu, y=None):
            return np.zeros(x.shape + (x.shape[1],))

        def zero_scalar(t, x, mu):
            return np.zeros(x.shape[0])

        for side in (self, other):
            for attr in ("dx", "dxx"):
                side.need(attr)
        measure_free = self.measure_free and other.measure_free
        if not measure_free:
            for side in (self, other):
                if not side.measure_free:
                    side.need("dmu")
                    side.need("dy_dmu")
        return LyapunovFunction(
            name=f"{self.name}+{other.name}",
            value=lambda t, x, mu: self.value(t, x, mu) + other.value(t, x, mu),
            dt=plus("dt", zero_scalar),
            dx=plus("dx", zero_vec),
            dxx=plus("dxx", zero_mat),
            dmu=None if measure_free else plus("dmu", zero_vec),
            dy_dmu=None if measure_free else plus("dy_dmu", zero_mat),
            measure_free=measure_free,
            dmu_x_free=(self.dmu_x_free or self.measure_free) and (other.dmu_x_free or other.measure_free),
        )


# --------------------------------------------------------------------------
# Catalog


def _sq(x):
    return np.sum(x * x, axis=1)


def _eye_batch(x, scale):
    return np.broadcast_to(scale * np.eye(x.shape[1]), x.shape + (x.shape[1],))


def constant(value=1.0):
    v = float(value)
    return LyapunovFunction(
        name="constant",
        value=lambda t, x, mu: np.full(x.shape[0], v),
        dx=lambda t, x, mu: np.zeros_like(x),
        dxx=lambda t, x, mu: _eye_batch(x, 0.0),
    )


def quadratic():
    """``|x|^2``."""
    return LyapunovFunction(
        name="quadratic",
        value=lambda t, x, mu: _sq(x),
        dx=lambda t, x, mu: 2.0 * x,
        dxx=lambda t, x, mu: _eye_batch(x, 2.0),
    )


def measure_quadratic():
    """``|x|^2 + int |y|^2 mu(dy)``; the measure derivative is ``y -> 2y``."""
    return LyapunovFunction(
        name="measure_quadratic",
        value=lambda t, x, mu: _sq(x) + mu.second_moment,
        dx=lambda t, x, mu: 2.0 * x,
        dxx=lambda t, x, mu: _eye_batch(x, 2.0),
        dmu=lambda t, x, mu, y: 2.0 * y,
        dy_dmu=lambda t, x, mu, y: _eye_batch(y, 2.0),
        measure_free=False,
        dmu_x_free=True,
    )


def squared_mean():
    """``|int y mu(dy)|^2``; the measure derivative is the constant ``2 mean(mu)``."""
    return LyapunovFunction(
        name="squared_mean",
        value=lambda t, x, mu: np.full(x.shape[0], float(mu.mean @ mu.mean)),
        dx=lambda t, x, mu: np.zeros_like(x),
        dxx=lambda t, x, mu: _eye_batch(x, 0.0),
        dmu=lambda t, x, mu, y: np.broadcast_to(2.0 * mu.mean, y.shape).copy(),
        dy_dmu=lambda t, x, mu, y: _eye_batch(y, 0.0),
        measure_free=False,
        dmu_x_free=True,
    )


def exp_weighted(alpha):
    """``exp(alpha t) |x|^2``."""
    a = float(alpha)
    return LyapunovFunction(
        name="exp_weighted",
        value=lambda t, x, mu: math.exp(a * t) * _sq(x),
        dt=lambda t, x, mu: a * math.exp(a * t) * _sq(x),
        dx=lambda t, x, mu: 2.0 * math.exp(a * t) * x,
        dxx=lambda t, x, mu: _eye_batch(x, 2.0 * math.exp(a * t)),
    )


TEST_FUNCTIONS = {
    "constant": constant,
    "quadratic": quadratic,
    "measure_quadratic": measure_quadratic,
    "squared_mean": squared_mean,
    "exp_weighted": exp_weighted,
}


def test_function(name, **params):
    if name not in TEST_FUNCTIONS:
        raise InvalidInputError(f"unknown test function {name!r}; valid: {sorted(TEST_FUNCTIONS)}")
    return TEST_FUNCTIONS[name](**params)


# --------------------------------------------------------------------------
# Generator


def mark_rule(law, jump_mc=1000, seed=0):
    """Marks and probability weights for integrals against the mark law.

    ``jump_mc=None`` selects the deterministic 1-d quadrature of the law.
    """
    if jump_mc is None:
        return law.quadrature()
    if int(jump_mc) < 1:
        raise InvalidInputError("jump_mc must be >= 1")
    marks = law.sample_marks(int(jump_mc), seed)
    return marks, np.full(marks.shape[0], 1.0 / marks.shape[0])


def _diffusion_trace(sig, hess):
    a = np.einsum("nij,nkj->nik", sig, sig)
    return np.einsum("nik,nki->n", a, hess)


def _rows_of(x, n):
    return np.broadcast_to(x, (n, x.shape[-1]))


def _measure_terms(c, h, t, x, mu, marks, weights, eta):
    """Terms 3-5 of the generator for every row of ``x``."""
    y = mu.points
    m = y.shape[0]
    by = c.drift(t, y, mu)
    sy = c.diffusion(t, y, mu)
    dmu = h.need("dmu")
    dy_dmu = h.need("dy_dmu")
    eta_x, eta_w = eta
    jumps = c.has_jumps
    if jumps:
        fy = [c.jump(t, y, mu, _rows_of(u, m)) for u in marks]

    def for_row(xr):
        g = dmu(t, xr, mu, y)
        t3 = np.mean(np.sum(by * g, axis=1))
        t4 = 0.5 * np.mean(_diffusion_trace(sy, dy_dmu(t, xr, mu, y)))
        t5 = 0.0
        if jumps:
            for w, f in zip(weights, fy):
                acc = 0.0
                for e, we in zip(eta_x, eta_w):
                    acc += we * np.mean(np.sum((dmu(t, xr, mu, y + e * f) - g) * f, axis=1))
                t5 += w * acc
            t5 *= c.law.total_rate
        return t3, t4, t5

    n = x.shape[0]
    if h.dmu_x_free:
        t3, t4, t5 = for_row(_rows_of(x[:1], m))
        return np.full(n, t3), np.full(n, t4), np.full(n, t5)
    out = np.array([for_row(_rows_of(x[i:i + 1], m)) for i in range(n)])
    return out[:, 0], out[:, 1], out[:, 2]


def generator_terms(c, h, t, x, mu, jump_mc=1000, eta_quad=ETA_NODES, seed=0):
    """The six generator terms at each row of ``x``, as a dict of ``(n,)`` arrays.

    Keys: ``drift``, ``diffusion``, ``measure_drift``, ``measure_diffusion``,
    ``measure_jump``, ``jump``.  Measure integrals are exact particle averages;
    mark integrals use :func:`mark_rule`; the ``eta`` integral uses
    Gauss-Legendre with ``eta_quad`` nodes on ``[0, 1]``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    n = x.shape[0]
    b = c.drift(t, x, mu)
    sig = c.diffusion(t, x, mu)
    gx = np.asarray(h.need("dx")(t, x, mu), dtype=float)
    terms = {
        "drift": np.sum(gx * b, axis=1),
        "diffusion": 0.5 * _diffusion_trace(sig, np.asarray(h.need("dxx")(t, x, mu), dtype=float)),
    }
    marks = weights = None
    if c.has_jumps:
        marks, weights = mark_rule(c.law, jump_mc, seed)
    if h.measure_free:
        zero = np.zeros(n)
        terms.update(measure_drift=zero, measure_diffusion=zero.copy(), measure_jump=zero.copy())
    else:
        nodes, w = np.polynomial.legendre.leggauss(int(eta_quad))
        eta = (0.5 * (nodes + 1.0), 0.5 * w)
        t3, t4, t5 = _measure_terms(c, h, t, x, mu, marks, weights, eta)
        terms.update(measure_drift=t3, measure_diffusion=t4, measure_jump=t5)
    jump = np.zeros(n)
    if c.has_jumps:
        hx = h.value(t, x, mu)
        for w, u in zip(weights, marks):
            f = c.jump(t, x, mu, _rows_of(u, n))
            jump += w * (h.value(t, x + f, mu) - hx - np.sum(f * gx, axis=1))
        jump *= c.law.total_rate
    terms["jump"] = jump
    return terms


def generator_apply(c, h, t, x, mu, jump_mc=1000, eta_quad=ETA_NODES, seed=0):
    """Mean-field generator of ``c`` applied to ``h`` at ``(t, x, mu)``.

    Returns a float for a single point ``x`` of shape ``(d,)`` and an
    ``(n,)`` array for a batch.
    """
    single = np.ndim(x) == 1
    total = sum(generator_terms(c, h, t, x, mu, jump_mc, eta_quad, seed).values())
    return float(total[0]) if single else total


# --------------------------------------------------------------------------
# Ito residual along a trajectory


@dataclass
class ItoResidual:
    """Residual ``R(t_k)`` of the discrete Ito identity with per-particle standard errors."""

    times: np.ndarray
    residual: np.ndarray
    se: np.ndarray

    @property
    def z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, self.residual / self.se, 0.0)
        return np.where((self.se == 0) & (self.residual != 0), np.inf, z)

    @property
    def terminal(self):
        return float(self.residual[-1]), float(self.se[-1]), float(self.z[-1])


def _k_measure_pairing(h, t, x_new, mu_new, dk):
    """Per-particle ``<E_x dmu h(t, x, mu)(X_i), dK_i>`` with ``x`` averaged over ``mu``."""
    dmu = h.need("dmu")
    if h.dmu_x_free:
        g = dmu(t, x_new, mu_new, x_new)
    else:
        n = x_new.shape[0]
        g = np.zeros_like(x_new)
        for j in range(n):
            g += dmu(t, _rows_of(x_new[j:j + 1], n), mu_new, x_new)
        g /= n
    return np.sum(g * dk, axis=1)


def ito_residual(traj, h, c, jump_mc=None, eta_quad=ETA_NODES, seed=0):
    """Residual of the Ito identity along a retained trajectory.

    ``c`` are the unscaled coefficients that produced ``traj``; the
    trajectory's ``epsilon`` is applied here.  The generator is frozen at the
    start of each step and the ``K`` pairings at its end.  With
    ``jump_mc=None`` 1-d mark integrals use deterministic quadrature.
    """
    if traj.snapshots is None or traj.dk is None:
        raise CapabilityError("trajectory has no retained snapshots; rerun with retain_snapshots")
    eps = traj.epsilon
    cs = c.scaled(eps)
    times = traj.times
    dt = traj.step
    snaps = traj.snapshots
    x0 = snaps[0]
    mu0 = EmpiricalMeasure(x0)
    base = h.value(times[0], x0, mu0)
    acc = np.zeros(x0.shape[0])
    residual = np.zeros(times.size)
    se = np.zeros(times.size)
    mu_k = mu0
    for k in range(times.size - 1):
        x_k = snaps[k]
        gen = generator_apply(cs, h, times[k], x_k, mu_k, jump_mc, eta_quad, seed)
        acc -= (h.time_derivative(times[k], x_k, mu_k) + gen) * dt
        x_new = snaps[k + 1]
        mu_new = EmpiricalMeasure(x_new)
        dk = eps * traj.dk[k]
        if np.any(dk):
            acc += np.sum(h.need("dx")(times[k + 1], x_new, mu_new) * dk, axis=1)
            if not h.measure_free:
                acc += _k_measure_pairing(h, times[k + 1], x_new, mu_new, dk)
        r = h.value(times[k + 1], x_new, mu_new) - base + acc
        residual[k + 1] = r.mean()
        se[k + 1] = r.std(ddof=1) / math.sqrt(r.size) if r.size > 1 else 0.0
        mu_k = mu_new
    return ItoResidual(times.copy(), residual, se)


# --------------------------------------------------------------------------
# Bihari envelope


@dataclass
class BihariBound:
    times: np.ndarray
    bound: np.ndarray
    in_domain: np.ndarray


def _breakpoints(psi):
    return tuple(getattr(psi, "breakpoints", ()))


def _check_psi(psi, lo, hi):
    grid = np.geomspace(max(lo, 1e-300), max(hi, 1e-300), 33)
    with np.errstate(over="ignore"):
        vals = np.asarray(psi(grid), dtype=float)
    # +inf is allowed: it only makes 1/psi vanish
    if np.any(np.isnan(vals)) or np.any(vals <= 0):
        raise InvalidInputError(f"psi must be positive and finite on [{lo:g}, {hi:g}]")


def _make_piece(psi):
    """``(a, b) -> int_a^b ds / psi(s)`` split at breakpoints and decades."""
    pts = _breakpoints(psi)

    def inv(s):
        with np.errstate(over="ignore"):
            return 1.0 / float(psi(s))

    def piece(a, b):
        lo_e, hi_e = math.ceil(math.log10(a)), math.floor(math.log10(b))
        decades = [10.0**e for e in range(lo_e, hi_e + 1)]
        edges = sorted(set([a, b] + [p for p in pts if a < p < b] + [d for d in decades if a < d < b]))
        total = 0.0
        for x0, x1 in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(inv, x0, x1, epsabs=0.0, epsrel=1e-13, limit=200)
            total += val
        return total

    return piece


def _make_g(psi):
    piece = _make_piece(psi)

    def g(r):
        if r == 1.0:
            return 0.0
        return piece(1.0, r) if r > 1 else -piece(r, 1.0)

    return g


def _cumulative(v_fn, times):
    if not callable(v_fn):
        return float(v_fn) * times
    out = np.zeros(times.size)
    prev, total = 0.0, 0.0
    for i, t in enumerate(times):
        if t > prev:
            val, _ = integrate.quad(v_fn, prev, t, epsabs=0.0, epsrel=1e-13, limit=200)
            total += val
        out[i] = total
        prev = t
    return out


def bihari_bound(c0, v_fn, psi, t_grid, r_max=1e300):
    """``G^{-1}(G(c0) + int_0^t v)`` on ``t_grid`` with ``G(r) = int_1^r ds / psi(s)``.

    ``v_fn`` is a non-negative callable or a constant.  ``c0 = 0`` is
    replaced by ``1e-12``.  Where the argument leaves the range of ``G`` the
    bound is ``inf`` and ``in_domain`` is ``False``.
    """
    if not c0 >= 0:
        raise InvalidInputError("c0 must be >= 0")
    c0 = float(c0) if c0 > 0 else 1e-12
    times = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise InvalidInputError("t_grid must be non-negative and sorted")
    g = _make_g(psi)
    _check_psi(psi, min(c0, 1.0), max(c0, 1.0))
    g0 = g(c0)
    targets = g0 + _cumulative(v_fn, times)
    bound = np.full(times.size, np.inf)
    ok = np.zeros(times.size, dtype=bool)
    if np.any(np.diff(targets) < 0) or np.any(targets < g0):
        raise InvalidInputError("v_fn must be non-negative")
    piece = _make_piece(psi)
    hi, g_hi = c0, g0
    saturated = False
    for i, target in enumerate(targets):
        if target == g0:
            bound[i], ok[i] = c0, True
            continue
        # grow geometrically until G(hi) passes the target
        while g_hi < target and not saturated:
            nxt = min(hi * 16.0, r_max)
            _check_psi(psi, hi, nxt)
            inc = piece(hi, nxt)
            saturated = nxt >= r_max or inc <= 1e-16 * max(1.0, abs(g_hi))
            hi, g_hi = nxt, g_hi + inc
        if g_hi < target:
            continue
        root = optimize.brentq(lambda r: g(r) - target, c0, hi,
                               xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)
        bound[i], ok[i] = root, True
    return BihariBound(times, bound, ok)
