"""Maximal monotone operators on R^d and their single-valued surrogates.

The catalog is closed: zero operator, normal cones of convex sets,
subdifferentials of a few convex functions, and positive semi-definite linear
maps.  Each member knows its exact resolvent ``J_lam = (I + lam A)^-1``, which
is what the implicit time step of the solver needs.

All point arguments may be a single point of shape ``(d,)`` or a batch of
shape ``(n, d)``; results keep the input shape.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, InfeasibleSetError, InvalidInputError

MEMBERSHIP_TOL = 1e-10
DYKSTRA_MAX_ITER = 10_000
DYKSTRA_TOL = 1e-10


def _as_points(x, dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim not in (1, 2):
        raise InvalidInputError(f"expected a point or a batch of points, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite input point")
    if dim is not None and x.shape[-1] != dim:
        raise InvalidInputError(f"expected dimension {dim}, got {x.shape[-1]}")
    return x


def _check_lambda(lam):
    lam = float(lam)
    if not (lam > 0 and np.isfinite(lam)):
        raise InvalidInputError(f"lambda must be positive and finite, got {lam}")
    return lam


# --------------------------------------------------------------------------
# Convex sets


class ConvexSet:
    """Closed convex subset of R^d with a non-empty interior."""

    kind = "abstract"
    dim: int

    def project(self, y):
        raise NotImplementedError

    def slacks(self, x):
        """Signed constraint slacks at a single point, non-negative inside."""
        raise NotImplementedError

    def anchor(self):
        """Some point used to seed interior searches."""
        return np.zeros(self.dim)

    def contains(self, y, tol=MEMBERSHIP_TOL):
        y = np.asarray(y, dtype=float)
        return np.linalg.norm(self.project(y) - y, axis=-1) <= tol

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Halfspace(ConvexSet):
    """``{x : <normal, x> >= offset}``."""

    normal: np.ndarray
    offset: float = 0.0
    kind = "halfspace"

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if n.ndim != 1 or not np.all(np.isfinite(n)) or not np.isfinite(self.offset):
            raise InvalidInputError("halfspace normal/offset must be finite")
        if np.linalg.norm(n) == 0:
            raise InfeasibleSetError("halfspace normal must be non-zero")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.size

    @property
    def unit_normal(self):
        return self.normal / np.linalg.norm(self.normal)

    def project(self, y):
        y = np.asarray(y, dtype=float)
        gap = np.maximum(self.offset - y @ self.normal, 0.0)
        return y + (gap / (self.normal @ self.normal))[..., None] * self.normal

    def slacks(self, x):
        return np.array([(x @ self.normal - self.offset) / np.linalg.norm(self.normal)])

    def anchor(self):
        return self.offset * self.normal / (self.normal @ self.normal)

    def to_dict(self):
        return {"kind": self.kind, "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class Ball(ConvexSet):
    """Closed Euclidean ball."""

    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not np.all(np.isfinite(c)) or not np.isfinite(self.radius):
            raise InvalidInputError("ball center/radius must be finite")
        if self.radius <= 0:
            raise InfeasibleSetError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.size

    def project(self, y):
        y = np.asarray(y, dtype=float)
        v = y - self.center
        r = np.linalg.norm(v, axis=-1)
        scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
        return self.center + v * scale[..., None]

    def slacks(self, x):
        return np.array([self.radius - np.sqrt(np.sum((x - self.center) ** 2) + 1e-300)])

    def anchor(self):
        return self.center.copy()

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    """Axis-aligned box; bounds may be infinite."""

    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("box bounds must be 1-d arrays of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise InvalidInputError("box bounds must not be NaN")
        if np.any(lo >= hi):
            raise InfeasibleSetError("box needs lo < hi in every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    def project(self, y):
        return np.clip(np.asarray(y, dtype=float), self.lo, self.hi)

    def slacks(self, x):
        s = np.concatenate([x - self.lo, self.hi - x])
        return s[np.isfinite(s)] if np.any(np.isfinite(s)) else np.array([np.inf])

    def anchor(self):
        lo = np.where(np.isfinite(self.lo), self.lo, np.where(np.isfinite(self.hi), self.hi - 1.0, 0.0))
        hi = np.where(np.isfinite(self.hi), self.hi, lo + 2.0)
        return 0.5 * (lo + hi)

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class Intersection(ConvexSet):
    """Intersection of convex sets, projected onto by Dykstra's algorithm."""

    sets: tuple
    max_iter: int = DYKSTRA_MAX_ITER
    tol: float = DYKSTRA_TOL
    interior_point: np.ndarray = field(default=None, repr=False)
    kind = "intersection"

    def __post_init__(self):
        sets = tuple(self.sets)
        if not sets:
            raise InvalidInputError("intersection of zero sets")
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise InvalidInputError(f"intersection members disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "sets", sets)
        point, depth = _deepest_point(sets)
        if depth <= MEMBERSHIP_TOL:
            raise InfeasibleSetError(
                f"intersection is empty or has empty interior (best depth {depth:.3g})"
            )
        object.__setattr__(self, "interior_point", point)

    @property
    def dim(self):
        return self.sets[0].dim

    def slacks(self, x):
        return np.concatenate([s.slacks(x) for s in self.sets])

    def anchor(self):
        return self.interior_point.copy()

    def project(self, y):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        incr = [np.zeros_like(y) for _ in self.sets]
        for _ in range(self.max_iter):
            x_prev = x
            for j, s in enumerate(self.sets):
                z = x + incr[j]
                x = s.project(z)
                incr[j] = z - x
            if np.max(np.abs(x - x_prev), initial=0.0) <= self.tol and all(
                np.all(s.contains(x, self.tol)) for s in self.sets
            ):
                return x
        raise ConvergenceError(
            f"Dykstra projection did not converge within {self.max_iter} iterations"
        )

    def to_dict(self):
        return {"kind": self.kind, "sets": [s.to_dict() for s in self.sets]}


def _deepest_point(sets):
    """Maximise the smallest constraint slack (capped at 1) over R^d."""
    x0 = np.mean([s.anchor() for s in sets], axis=0)
    d = x0.size

    def all_slacks(z):
        return np.concatenate([s.slacks(z[:d]) for s in sets]) - z[d]

    start = np.append(x0, min(np.min(all_slacks(np.append(x0, 0.0))), 1.0))
    res = minimize(
        lambda z: -z[d],
        start,
        method="SLSQP",
        constraints=[{"type": "ineq", "fun": all_slacks}],
        bounds=[(None, None)] * d + [(None, 1.0)],
        options={"maxiter": 500, "ftol": 1e-12},
    )
    point = res.x[:d]
    depth = float(np.min(np.concatenate([s.slacks(point) for s in sets])))
    return point, depth


def project(convex_set, y):
    """Euclidean projection of ``y`` onto ``convex_set``."""
    y = _as_points(y, convex_set.dim)
    return convex_set.project(y)


# --------------------------------------------------------------------------
# Convex functions for subdifferential operators (all finite on R^d)


@dataclass(frozen=True)
class L1Norm:
    weight: float = 1.0
    name = "l1"

    def value(self, x):
        return self.weight * np.sum(np.abs(x), axis=-1)

    def prox(self, lam, x):
        t = lam * self.weight
        return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)

    def min_subgradient(self, x):
        return self.weight * np.sign(x)


@dataclass(frozen=True)
class EuclideanNorm:
    weight: float = 1.0
    name = "l2"

    def value(self, x):
        return self.weight * np.linalg.norm(x, axis=-1)

    def prox(self, lam, x):
        t = lam * self.weight
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x * np.maximum(1.0 - t / np.where(r > 0, r, 1.0), 0.0)

    def min_subgradient(self, x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return self.weight * x / np.where(r > 0, r, np.inf)


@dataclass(frozen=True)
class HalfSquaredNorm:
    weight: float = 1.0
    name = "half_squared"

    def value(self, x):
        return 0.5 * self.weight * np.sum(x * x, axis=-1)

    def prox(self, lam, x):
        return x / (1.0 + lam * self.weight)

    def min_subgradient(self, x):
        return self.weight * x


CONVEX_FUNCTIONS = {cls.name: cls for cls in (L1Norm, EuclideanNorm, HalfSquaredNorm)}


# --------------------------------------------------------------------------
# Operators


class MonotoneOperator:
    """Base class; subclasses implement ``_resolvent`` and ``_minimal_section``."""

    kind = "abstract"
    dim: int
    # False only for normal cones, whose domain is the set itself.
    full_domain = True

    @property
    def accuracy(self):
        """Absolute error bound of the resolvent (zero for closed forms)."""
        return 0.0

    def resolvent(self, lam, x):
        lam = _check_lambda(lam)
        x = _as_points(x, self.dim)
        return self._resolvent(lam, x)

    def yosida(self, lam, x):
        lam = _check_lambda(lam)
        x = _as_points(x, self.dim)
        return (x - self._resolvent(lam, x)) / lam

    def minimal_section(self, x):
        x = _as_points(x, self.dim)
        return self._minimal_section(x)

    def in_domain(self, x, tol=MEMBERSHIP_TOL):
        x = _as_points(x, self.dim)
        return np.ones(x.shape[:-1], dtype=bool)

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Zero(MonotoneOperator):
    dim: int = 1
    kind = "zero"

    def _resolvent(self, lam, x):
        return x.copy()

    def _minimal_section(self, x):
        return np.zeros_like(x)

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim}


@dataclass(frozen=True, eq=False)
class NormalCone(MonotoneOperator):
    """Normal cone of a convex set; its resolvent is the metric projection.

    The domain is the set itself rather than all of R^d, so systems built on
    it are reflected diffusions (exploratory: outside the full-domain regime).
    """

    convex_set: ConvexSet
    kind = "normal_cone"
    full_domain = False

    @property
    def dim(self):
        return self.convex_set.dim

    @property
    def accuracy(self):
        # Dykstra stops on a step-size test; allow a margin over its tolerance
        return 10.0 * self.convex_set.tol if isinstance(self.convex_set, Intersection) else 0.0

    def _resolvent(self, lam, x):
        return self.convex_set.project(x)

    def _minimal_section(self, x):
        inside = np.expand_dims(self.convex_set.contains(x), -1)
        return np.where(inside, 0.0, np.inf) * np.ones_like(x)

    def in_domain(self, x, tol=MEMBERSHIP_TOL):
        x = _as_points(x, self.dim)
        return self.convex_set.contains(x, tol)

    def to_dict(self):
        return {"kind": self.kind, "set": self.convex_set.to_dict()}


@dataclass(frozen=True, eq=False)
class Subdifferential(MonotoneOperator):
    function: object
    dim: int = 1
    kind = "subdifferential"

    def __post_init__(self):
        if not (np.isfinite(self.function.weight) and self.function.weight >= 0):
            raise InvalidInputError("convex function weight must be finite and >= 0")

    def _resolvent(self, lam, x):
        return self.function.prox(lam, x)

    def _minimal_section(self, x):
        return self.function.min_subgradient(x)

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim,
                "function": self.function.name, "weight": self.function.weight}


@dataclass(frozen=True, eq=False)
class LinearPSD(MonotoneOperator):
    """``x -> M x`` with ``M + M^T`` positive semi-definite."""

    matrix: np.ndarray
    kind = "linear_psd"

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("matrix entries must be finite")
        if np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) < -1e-12:
            raise InvalidInputError("matrix is not monotone (symmetric part has a negative eigenvalue)")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def _resolvent(self, lam, x):
        inv = np.linalg.inv(np.eye(self.dim) + lam * self.matrix)
        return np.einsum("ij,...j->...i", inv, x)

    def _minimal_section(self, x):
        return np.einsum("ij,...j->...i", self.matrix, x)

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


def resolvent(op, lam, x):
    """``J_lam x``: the unique ``y`` with ``x in y + lam * A(y)``."""
    return op.resolvent(lam, x)


def yosida(op, lam, x):
    """Yosida approximation ``(x - J_lam x) / lam``."""
    return op.yosida(lam, x)


def minimal_section(op, x):
    """Least-norm element of ``A(x)``; entries are ``inf`` when ``x`` is outside the domain."""
    return op.minimal_section(x)


# --------------------------------------------------------------------------
# Audit


@dataclass
class MonotonicityAudit:
    n_pairs: int
    min_inner: float
    n_violations: int
    tolerance: float
    lam: float

    @property
    def passed(self):
        return self.n_violations == 0


def gaussian_sampler(dim, scale=1.0, center=0.0):
    def sample(rng, n):
        return center + scale * rng.standard_normal((n, dim))
    return sample


def audit_monotonicity(op, sampler, n, lam=1e-3, tolerance=1e-12, rng=None):
    """Check ``<x1 - x2, y1 - y2> >= 0`` on sampled graph points.

    Graph points are manufactured through the Yosida surrogate: for any ``x``,
    ``(J_lam x, A_lam x)`` lies in the graph of ``A``.  The second component
    carries rounding of order ``|x| eps / lam`` and the first of order
    ``|J x| eps``, so ``tolerance`` is applied relative to
    ``1 + |J x1 - J x2| (|x1| + |x2|) / lam + (|J x1| + |J x2|) |y1 - y2|``;
    iterative resolvents add ``2 accuracy |y1 - y2|``.
    """
    if n < 1:
        raise InvalidInputError("need at least one sample pair")
    rng = np.random.default_rng(rng)
    x1 = _as_points(sampler(rng, n), op.dim)
    x2 = _as_points(sampler(rng, n), op.dim)
    p1, p2 = op.resolvent(lam, x1), op.resolvent(lam, x2)
    y1, y2 = (x1 - p1) / lam, (x2 - p2) / lam
    inner = np.sum((p1 - p2) * (y1 - y2), axis=-1)
    nrm = lambda a: np.linalg.norm(a, axis=-1)  # noqa: E731
    dy = nrm(y1 - y2)
    scale = 1.0 + nrm(p1 - p2) * (nrm(x1) + nrm(x2)) / lam + (nrm(p1) + nrm(p2)) * dy
    slack = 2.0 * op.accuracy * dy
    return MonotonicityAudit(
        n_pairs=int(n),
        min_inner=float(np.min(inner)),
        n_violations=int(np.sum(inner < -(tolerance * scale + slack))),
        tolerance=tolerance,
        lam=lam,
    )


# --------------------------------------------------------------------------
# Config round-trip


def set_from_dict(spec):
    kind = spec.get("kind")
    if kind == "halfspace":
        return Halfspace(spec["normal"], spec.get("offset", 0.0))
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "intersection":
        return Intersection(tuple(set_from_dict(s) for s in spec["sets"]))
    raise InvalidInputError(f"unknown set kind {kind!r}; valid kinds: {sorted(SET_KINDS)}")


def operator_from_dict(spec, dim=None):
    kind = spec.get("kind")
    if kind == "zero":
        return Zero(int(spec.get("dim", dim or 1)))
    if kind == "normal_cone":
        return NormalCone(set_from_dict(spec["set"]))
    if kind == "subdifferential":
        fn = CONVEX_FUNCTIONS[spec["function"]](float(spec.get("weight", 1.0)))
        return Subdifferential(fn, int(spec.get("dim", dim or 1)))
    if kind == "linear_psd":
        return LinearPSD(spec["matrix"])
    raise InvalidInputError(f"unknown operator kind {kind!r}; valid kinds: {sorted(OPERATOR_KINDS)}")


SET_KINDS = ("halfspace", "ball", "box", "intersection")
OPERATOR_KINDS = ("zero", "normal_cone", "subdifferential", "linear_psd")
