"""Coefficient triples ``(b, sigma, f)``, their regularity moduli, and averaging checks.

Coefficients are row-vectorised callables:

* ``b(t, x, mu)``        -> ``(n, d)``
* ``sigma(t, x, mu)``    -> ``(n, d, m)``
* ``f(t, x, mu, u)``     -> ``(n, d)`` with ``u`` of shape ``(n, p)`` (row-paired);
  ``t`` is a scalar or an ``(n,)`` array of per-row jump times

where ``x`` has shape ``(n, d)`` and ``mu`` is an :class:`EmpiricalMeasure`.
Averaged triples are ordinary :class:`CoefficientSet` objects that ignore ``t``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .measure import EmpiricalMeasure, rho_surrogate
from .noise import JumpLaw

MODULUS_KINDS = ("linear", "log", "loglog")


@dataclass(frozen=True)
class Modulus:
    """Concave non-decreasing modulus with ``kappa(0) = 0``.

    ``linear``: ``L u``.  ``log``: ``u log(1/u)`` below ``delta``, continued by
    its tangent line at ``delta``.  ``loglog``: ``u log(1/u) log log(1/u)``
    below ``delta``, same tangent continuation.
    """

    kind: str = "linear"
    L: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if self.kind not in MODULUS_KINDS:
            raise InvalidInputError(f"unknown modulus kind {self.kind!r}; valid: {MODULUS_KINDS}")
        if self.kind == "linear":
            if not self.L > 0:
                raise InvalidInputError("linear modulus needs L > 0")
            return
        if not 0 < self.delta < 1 / math.e:
            raise InvalidInputError(f"delta must lie in (0, 1/e), got {self.delta}")
        if self._core_slope(self.delta) < 0:
            # loglog is only non-decreasing up to where its slope vanishes
            raise InvalidInputError(
                f"delta={self.delta} too large: modulus would decrease past it"
            )

    def _core(self, u):
        ell = np.log(1.0 / u)
        if self.kind == "log":
            return u * ell
        return u * ell * np.log(ell)

    def _core_slope(self, u):
        ell = math.log(1.0 / u)
        if self.kind == "log":
            return ell - 1.0
        return ell * math.log(ell) - math.log(ell) - 1.0

    @property
    def breakpoints(self):
        return () if self.kind == "linear" else (self.delta,)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0) or np.any(np.isnan(u)):
            raise InvalidInputError("modulus argument must be >= 0")
        if self.kind == "linear":
            return self.L * u
        d = self.delta
        with np.errstate(divide="ignore", invalid="ignore"):
            small = np.where(u > 0, self._core(np.clip(u, 1e-300, d)), 0.0)
        tangent = float(self._core(np.float64(d))) + self._core_slope(d) * (u - d)
        return np.where(u <= d, small, tangent)

    def to_dict(self):
        if self.kind == "linear":
            return {"kind": self.kind, "L": self.L}
        return {"kind": self.kind, "delta": self.delta}


def modulus_eval(m, u):
    return m(u)


def _bound(value):
    return value if callable(value) else (lambda t, v=float(value): v)


def _sup_bound(value, horizon=1e3):
    if not callable(value):
        return float(value)
    # the bound functions are non-decreasing; the far end of the range is the sup
    return float(value(horizon))


@dataclass
class CoefficientSet:
    """Drift, diffusion and jump coefficients with their declared regularity data."""

    b: object
    sigma: object = None
    f: object = None
    dim: int = 1
    noise_dim: int = 1
    law: JumpLaw = field(default_factory=JumpLaw)
    beta: float = 1.0
    kappa: Modulus = field(default_factory=Modulus)
    phi: Modulus = field(default_factory=Modulus)
    L1_bound: object = 1.0
    L2_bound: object = 1.0
    jump_affine: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def drift(self, t, x, mu):
        return np.asarray(self.b(t, x, mu), dtype=float)

    def diffusion(self, t, x, mu):
        if self.sigma is None:
            return np.zeros((x.shape[0], self.dim, self.noise_dim))
        return np.asarray(self.sigma(t, x, mu), dtype=float)

    def jump(self, t, x, mu, u):
        if self.f is None:
            return np.zeros_like(x)
        return np.asarray(self.f(t, x, mu, u), dtype=float)

    @property
    def has_jumps(self):
        return self.f is not None and self.law.total_rate > 0

    def compensator(self, t, x, mu, marks=None, chunk=256):
        """``int f(t, x, mu, u) v(du)`` for every row of ``x``.

        Mark-affine coefficients are integrated exactly through the mean mark;
        otherwise the average over ``marks`` (a fixed Monte Carlo sample) is used.
        """
        if not self.has_jumps:
            return np.zeros_like(x)
        rate = self.law.total_rate
        n = x.shape[0]
        if self.jump_affine:
            u = np.broadcast_to(self.law.mean_mark, (n, self.law.mark_dim))
            return rate * self.jump(t, x, mu, u)
        if marks is None:
            raise InvalidInputError("non-affine jump coefficient needs compensator marks")
        acc = np.zeros_like(x)
        for a in range(0, marks.shape[0], chunk):
            mk = marks[a:a + chunk]
            xr = np.repeat(x, mk.shape[0], axis=0)
            ur = np.tile(mk, (n, 1))
            acc += self.jump(t, xr, mu, ur).reshape(n, mk.shape[0], -1).sum(axis=1)
        return rate * acc / marks.shape[0]

    def L1(self, t):
        return _bound(self.L1_bound)(t)

    def L2(self, t):
        return _bound(self.L2_bound)(t)

    def scaled(self, eps):
        """Coefficients of the standard-form system: ``eps*b``, ``sqrt(eps)*sigma``, ``sqrt(eps)*f``."""
        if eps == 1:
            return self
        se = math.sqrt(eps)
        b, s, f = self.b, self.sigma, self.f
        return replace(
            self,
            b=lambda t, x, mu: eps * b(t, x, mu),
            sigma=None if s is None else (lambda t, x, mu: se * s(t, x, mu)),
            f=None if f is None else (lambda t, x, mu, u: se * f(t, x, mu, u)),
            name=f"{self.name}*eps={eps}",
        )


# --------------------------------------------------------------------------
# Catalog


def _linear_mean_field(params, dim, law):
    a = float(params.get("a", 1.0))
    c = float(params.get("c", 0.0))
    s = float(params.get("sigma", 0.0))
    g = float(params.get("jump_scale", 0.0))
    eye = np.eye(dim)

    def b(t, x, mu):
        return -a * x + c * mu.mean

    def sigma(t, x, mu):
        return np.broadcast_to(s * eye, (x.shape[0], dim, dim))

    def f(t, x, mu, u):
        return g * u

    lip = max(2 * a * a, 2 * c * c * 25 / 16, 1e-12)
    growth = max(2 * a * a, 2 * c * c, dim * s * s, g * g, 1e-12)
    cs = CoefficientSet(
        b=b, sigma=sigma if s else None, f=f if g else None, dim=dim, noise_dim=dim, law=law,
        kappa=Modulus("linear", lip), phi=Modulus("linear", max(g * g, 1e-12)),
        L1_bound=lip, L2_bound=growth, jump_affine=True,
        name="linear_mean_field", params=dict(a=a, c=c, sigma=s, jump_scale=g),
    )
    return cs, cs


def _sin2_mean_field(params, dim, law):
    """Drift ``a sin^2(t) (-x + mean(mu))``; its time average is half of that."""
    a = float(params.get("a", 1.0))
    s = float(params.get("sigma", 0.0))
    g = float(params.get("jump_scale", 0.0))
    eye = np.eye(dim)

    def b(t, x, mu):
        return a * math.sin(t) ** 2 * (mu.mean - x)

    def b_avg(t, x, mu):
        return 0.5 * a * (mu.mean - x)

    def sigma(t, x, mu):
        return np.broadcast_to(s * eye, (x.shape[0], dim, dim))

    def f(t, x, mu, u):
        return g * u

    lip = max(2 * a * a * 25 / 16 * 2, 1e-12)
    growth = max(4 * a * a + dim * s * s, g * g, 1e-12)
    common = dict(dim=dim, noise_dim=dim, law=law, kappa=Modulus("linear", lip),
                  phi=Modulus("linear", max(g * g, 1e-12)), L1_bound=lip, L2_bound=growth,
                  jump_affine=True, params=dict(a=a, sigma=s, jump_scale=g))
    full = CoefficientSet(b=b, sigma=sigma if s else None, f=f if g else None,
                          name="sin2_mean_field", **common)
    avg = CoefficientSet(b=b_avg, sigma=sigma if s else None, f=f if g else None,
                         name="sin2_mean_field_avg", **common)
    return full, avg


def _zero(params, dim, law):
    cs = CoefficientSet(b=lambda t, x, mu: np.zeros_like(x), dim=dim, noise_dim=dim, law=law,
                        L1_bound=1e-12, L2_bound=1e-12, jump_affine=True, name="zero")
    return cs, cs


COEFFICIENT_CATALOG = {
    "zero": _zero,
    "linear_mean_field": _linear_mean_field,
    "sin2_mean_field": _sin2_mean_field,
}


def build_coefficients(name, params=None, dim=1, law=None):
    """Return ``(full, averaged)`` coefficient sets from the catalog."""
    if name not in COEFFICIENT_CATALOG:
        raise InvalidInputError(
            f"unknown coefficient system {name!r}; valid: {sorted(COEFFICIENT_CATALOG)}"
        )
    return COEFFICIENT_CATALOG[name](dict(params or {}), int(dim), law or JumpLaw(mark_dim=dim))


# --------------------------------------------------------------------------
# Averaging defects


@dataclass
class DefectReport:
    psi1: float
    psi2: float
    psi3: float
    T1: float
    normaliser: float


def time_average_defect(c, avg, x, mu, T1, n_quad, n_marks=1000, seed=0):
    """Estimate the averaging defects at one state ``(x, mu)``.

    Returns the time averages over ``[0, T1]`` of ``|b - b_avg|^2``,
    ``|sigma - sigma_avg|^2`` and the mark-averaged ``|f - f_avg|^2``, each
    divided by ``1 + |x|^2 + |mu|_2^2``.  The jump defect is additionally
    divided by the empirical mean of ``|u|^2`` over the marks used.
    """
    if not T1 > 0:
        raise InvalidInputError("T1 must be positive")
    if n_quad < 2:
        raise InvalidInputError("n_quad must be >= 2")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)
    norm = 1.0 + float(np.sum(x**2)) + mu.second_moment
    nodes = np.linspace(0.0, T1, n_quad + 1)
    w = np.full(nodes.size, T1 / n_quad)
    w[0] *= 0.5
    w[-1] *= 0.5

    jumps = c.f is not None or avg.f is not None
    if jumps:
        marks = c.law.sample_marks(n_marks, seed)
        mean_sq_u = float(np.mean(np.sum(marks**2, axis=1)))
        xr = np.repeat(x, n_marks, axis=0)

    d1 = np.empty(nodes.size)
    d2 = np.empty(nodes.size)
    d3 = np.zeros(nodes.size)
    b_bar = avg.drift(0.0, x, mu)
    s_bar = avg.diffusion(0.0, x, mu)
    f_bar = avg.jump(0.0, xr, mu, marks) if jumps else None
    for i, s in enumerate(nodes):
        v1 = c.drift(s, x, mu) - b_bar
        v2 = c.diffusion(s, x, mu) - s_bar
        if not (np.all(np.isfinite(v1)) and np.all(np.isfinite(v2))):
            raise InvalidInputError(f"non-finite coefficient value at s={s}")
        d1[i] = np.sum(v1**2)
        d2[i] = np.sum(v2**2)
        if jumps:
            v3 = c.jump(s, xr, mu, marks) - f_bar
            d3[i] = np.mean(np.sum(v3**2, axis=1)) / mean_sq_u
    return DefectReport(
        psi1=float(w @ d1) / T1 / norm,
        psi2=float(w @ d2) / T1 / norm,
        psi3=float(w @ d3) / T1 / norm,
        T1=float(T1),
        normaliser=norm,
    )


# --------------------------------------------------------------------------
# Inherited regularity of averaged coefficients


@dataclass
class InheritedBoundsReport:
    n: int
    lipschitz_constant: float
    growth_constant: float
    lipschitz_ceiling: float
    growth_ceiling: float
    lipschitz_flag: bool
    growth_flag: bool


def gaussian_tuple_sampler(dim, ensemble_size=16, scale=1.0):
    """Sampler of ``(x, y, mu, nu)`` with Gaussian points and Gaussian ensembles."""
    def sample(rng):
        x = scale * rng.standard_normal(dim)
        y = scale * rng.standard_normal(dim)
        mu = EmpiricalMeasure(scale * rng.standard_normal((ensemble_size, dim)) + rng.standard_normal(dim))
        nu = EmpiricalMeasure(scale * rng.standard_normal((ensemble_size, dim)) + rng.standard_normal(dim))
        return x, y, mu, nu
    return sample


def audit_inherited_bounds(avg, c, sampler=None, n=1000, seed=0):
    """Fit the smallest constants making the averaged triple satisfy the regularity bounds.

    The Lipschitz-type constant is ``max |dB|^2 / kappa(beta |x-y|^2 + r^2)``
    where ``r`` is the computable surrogate for the measure distance; the
    growth constant is ``max (|b|^2 + |sigma|^2) / (1 + |x|^2 + |mu|_2^2)``.
    They are flagged against ``3 sup L1`` and ``2 sup L2`` of ``c``.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    sampler = sampler or gaussian_tuple_sampler(avg.dim)
    lip = 0.0
    growth = 0.0
    for _ in range(n):
        x, y, mu, nu = sampler(rng)
        x2, y2 = np.atleast_2d(x), np.atleast_2d(y)
        bx, by = avg.drift(0.0, x2, mu), avg.drift(0.0, y2, nu)
        sx, sy = avg.diffusion(0.0, x2, mu), avg.diffusion(0.0, y2, nu)
        num = float(np.sum((bx - by) ** 2) + np.sum((sx - sy) ** 2))
        arg = c.beta * float(np.sum((x2 - y2) ** 2)) + rho_surrogate(mu, nu) ** 2
        den = float(c.kappa(arg))
        if den > 0:
            lip = max(lip, num / den)
        g = float(np.sum(bx**2) + np.sum(sx**2)) / (1.0 + float(np.sum(x2**2)) + mu.second_moment)
        growth = max(growth, g)
    lip_ceiling = 3.0 * _sup_bound(c.L1_bound)
    growth_ceiling = 2.0 * _sup_bound(c.L2_bound)
    return InheritedBoundsReport(
        n=int(n),
        lipschitz_constant=lip,
        growth_constant=growth,
        lipschitz_ceiling=lip_ceiling,
        growth_ceiling=growth_ceiling,
        lipschitz_flag=lip > lip_ceiling,
        growth_flag=growth > growth_ceiling,
    )
