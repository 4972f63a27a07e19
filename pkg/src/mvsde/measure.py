"""Empirical probability measures of particle ensembles.

The sup-form metric over Lipschitz test functions with quadratic growth has no
constructive evaluation; convergence is certified with two computable
quantities instead:

* the coupled RMS distance ``sqrt(mean |x_i - y_i|^2)`` of two index-matched
  ensembles, an upper bound for that metric, and
* the exact 1-d quadratic Wasserstein distance of two equal-size ensembles,
  the smallest RMS distance over all index couplings.
"""

import numpy as np

from .errors import InvalidInputError


class EmpiricalMeasure:
    """Uniform-weight measure on the rows of an ``(N, d)`` array.

    The array is copied and frozen, so a measure is an immutable snapshot.
    """

    __slots__ = ("points", "_mean", "_second_moment")

    def __init__(self, points, copy=True):
        pts = np.array(points, dtype=float, copy=copy)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidInputError(f"need an (N, d) array with N >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("empirical measure has non-finite points")
        pts.flags.writeable = False
        self.points = pts
        self._mean = None
        self._second_moment = None

    @classmethod
    def dirac(cls, x):
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def mean(self):
        if self._mean is None:
            self._mean = self.points.mean(axis=0)
        return self._mean

    @property
    def second_moment(self):
        if self._second_moment is None:
            self._second_moment = float(np.mean(np.sum(self.points**2, axis=1)))
        return self._second_moment

    def integrate(self, fn):
        """``int fn(y) mu(dy)`` for a row-vectorised ``fn``."""
        return np.mean(fn(self.points), axis=0)

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, dim={self.dim})"


def as_measure(mu):
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def second_moment(mu):
    """``int |x|^2 mu(dx)``."""
    return as_measure(mu).second_moment


def coupled_rms_distance(x_particles, y_particles):
    """``sqrt(mean_i |x_i - y_i|^2)`` for index-matched ensembles."""
    x = np.asarray(getattr(x_particles, "points", x_particles), dtype=float)
    y = np.asarray(getattr(y_particles, "points", y_particles), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape != y.shape:
        raise InvalidInputError(f"ensembles must match in shape, got {x.shape} and {y.shape}")
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


def wasserstein2_1d(mu, nu):
    """Exact W2 between two equal-size empirical measures on the real line."""
    a, b = as_measure(mu), as_measure(nu)
    if a.dim != 1 or b.dim != 1:
        raise InvalidInputError("wasserstein2_1d needs one-dimensional measures")
    if a.n != b.n:
        raise InvalidInputError(f"measures must have equal size, got {a.n} and {b.n}")
    xs = np.sort(a.points[:, 0])
    ys = np.sort(b.points[:, 0])
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def rho_surrogate(mu, nu):
    """Computable stand-in for the weak-convergence metric between two ensembles.

    Exact W2 in one dimension; the index-coupled RMS distance otherwise. Both
    dominate the sup-form metric.
    """
    a, b = as_measure(mu), as_measure(nu)
    if a.dim == 1 and a.n == b.n:
        return wasserstein2_1d(a, b)
    if a.n == b.n:
        return coupled_rms_distance(a.points, b.points)
    # unequal sizes: couple through quantiles of the pooled index grid
    m = np.lcm(a.n, b.n)
    return coupled_rms_distance(np.repeat(np.sort(a.points, axis=0), m // a.n, axis=0),
                                np.repeat(np.sort(b.points, axis=0), m // b.n, axis=0))
