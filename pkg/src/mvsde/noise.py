"""Brownian increments and Poisson random measure events.

The characteristic measure of the Poisson point process is modelled as
``total_rate * (law of one mark)``, with marks supported on the ball
``{|u| <= alpha}``.  Jump events are drawn for the whole horizon at once and
later binned into time steps, so exact event times are available.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import rng as crng
from .errors import InvalidInputError

MARK_LAWS = ("uniform_ball", "truncated_gaussian")


@dataclass(frozen=True)
class JumpLaw:
    """Finite characteristic measure ``v = total_rate * mark law`` on ``|u| <= alpha``.

    ``scale`` is the standard deviation of the untruncated Gaussian for the
    ``truncated_gaussian`` mark law and is ignored otherwise.
    """

    total_rate: float = 0.0
    alpha: float = 1.0
    mark_law: str = "uniform_ball"
    mark_dim: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.total_rate) and self.total_rate >= 0):
            raise InvalidInputError(f"jump rate must be finite and >= 0, got {self.total_rate}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"mark radius alpha must be positive, got {self.alpha}")
        if self.mark_law not in MARK_LAWS:
            raise InvalidInputError(f"unknown mark law {self.mark_law!r}; valid: {MARK_LAWS}")
        if int(self.mark_dim) < 1:
            raise InvalidInputError("mark dimension must be >= 1")
        if not self.scale > 0:
            raise InvalidInputError("mark scale must be positive")

    @property
    def mean_sq_mark(self):
        """``E|u|^2`` under the normalised mark law."""
        p, a = self.mark_dim, self.alpha
        if self.mark_law == "uniform_ball":
            return a * a * p / (p + 2.0)
        x = (a / self.scale) ** 2
        return self.scale**2 * p * stats.chi2.cdf(x, p + 2) / stats.chi2.cdf(x, p)

    @property
    def second_mark_moment(self):
        """``int |u|^2 v(du)``."""
        return self.total_rate * self.mean_sq_mark

    @property
    def mean_mark(self):
        # both mark laws are symmetric about the origin
        return np.zeros(self.mark_dim)

    def transform(self, z, w):
        """Map ``mark_dim`` standard normals ``z`` and one uniform ``w`` to a mark."""
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        p = self.mark_dim
        if p == 1:
            direction = np.where(z >= 0, 1.0, -1.0)
        else:
            norm = np.linalg.norm(z, axis=-1, keepdims=True)
            direction = z / np.where(norm > 0, norm, 1.0)
        if self.mark_law == "uniform_ball":
            radius = self.alpha * w ** (1.0 / p)
        else:
            top = stats.chi.cdf(self.alpha / self.scale, p)
            radius = self.scale * stats.chi.ppf(w * top, p)
            radius = np.minimum(radius, self.alpha)
        return direction * radius[..., None]

    def sample_marks(self, n, rng):
        """``n`` i.i.d. marks drawn with a numpy ``Generator``."""
        rng = np.random.default_rng(rng)
        return self.transform(rng.standard_normal((n, self.mark_dim)), rng.random(n))

    def quadrature(self, n_nodes=64):
        """Nodes ``(2 n_nodes, 1)`` and weights summing to one for 1-d mark laws.

        Gauss-Legendre on each half of ``[-alpha, alpha]``, weighted by the mark density.
        """
        if self.mark_dim != 1:
            raise InvalidInputError("mark quadrature is only available for 1-d marks")
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        a = self.alpha
        half = 0.5 * a * (nodes + 1.0)
        u = np.concatenate([-half[::-1], half])[:, None]
        wq = np.concatenate([weights[::-1], weights]) * 0.5 * a
        if self.mark_law == "uniform_ball":
            dens = np.full(u.shape[0], 1.0 / (2 * a))
        else:
            s = self.scale
            z = 2 * stats.norm.cdf(a / s) - 1
            dens = stats.norm.pdf(u[:, 0] / s) / (s * z)
        return u, wq * dens

    def mark_expectation(self, g, n_mc=100_000, rng=0):
        """``E[g(u)]`` under the normalised mark law.

        One-dimensional marks use :meth:`quadrature`; higher dimensions fall
        back to Monte Carlo with ``n_mc`` marks.
        """
        if self.mark_dim == 1:
            u, w = self.quadrature()
            return np.tensordot(w, np.asarray(g(u), dtype=float), axes=(0, 0))
        marks = self.sample_marks(n_mc, rng)
        return np.mean(np.asarray(g(marks), dtype=float), axis=0)

    def to_dict(self):
        return {"rate": self.total_rate, "alpha": self.alpha, "mark_law": self.mark_law,
                "mark_dim": self.mark_dim, "scale": self.scale}


# --------------------------------------------------------------------------
# Single-stream primitives


def sample_brownian(m, h, stream):
    """``m`` independent Gaussians with variance ``h`` from ``stream``."""
    if h < 0:
        raise InvalidInputError(f"step must be >= 0, got {h}")
    return np.sqrt(h) * stream.normals(m, tag=crng.TAG_BROWNIAN)


def _jump_events(law, horizon, seed, streams, position):
    """Events for many streams: (stream, time, mark) sorted by stream then time."""
    streams = np.asarray(streams, dtype=np.int64)
    lam = law.total_rate * horizon
    if lam == 0 or streams.size == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0), np.empty((0, law.mark_dim)))
    u = crng.uniforms(seed, streams, position, crng.TAG_JUMP_COUNT)[..., 0]
    counts = stats.poisson.ppf(u, lam).astype(np.int64)
    owner = np.repeat(streams, counts)
    starts = np.cumsum(counts) - counts
    j = np.arange(owner.size) - np.repeat(starts, counts)
    times = horizon * crng.uniforms(seed, owner, position, crng.TAG_JUMP_TIME, 1, j)[..., 0]
    p = law.mark_dim
    lanes = (p + 1) // 2 + 1
    z = crng.normals(seed, owner, position, crng.TAG_JUMP_MARK, p, j * lanes)
    w = crng.uniforms(seed, owner, position, crng.TAG_JUMP_MARK, 1, j * lanes + lanes - 1)[..., 0]
    marks = law.transform(z, w)
    order = np.lexsort((times, owner))
    return owner[order], times[order], marks[order]


def sample_jump_events(law, horizon, stream):
    """Homogeneous Poisson events on ``(0, horizon]`` as a list of ``(time, mark)``."""
    if horizon < 0:
        raise InvalidInputError(f"horizon must be >= 0, got {horizon}")
    _, times, marks = _jump_events(law, horizon, stream.seed, [stream.stream_id], stream.position)
    stream.position += 1
    return [(float(t), m) for t, m in zip(times, marks)]


# --------------------------------------------------------------------------
# Whole-ensemble noise


@dataclass
class NoisePanel:
    """Noise seen by one particle over the full horizon."""

    brownian_increments: np.ndarray
    jump_events: list
    master_seed: int
    stream_id: int


class NoiseSource:
    """Noise for ``n_streams`` particles on a uniform grid of ``n_steps`` steps.

    Brownian increments are generated lazily per step; jump events are drawn
    once for the horizon.  Both are pure functions of ``(seed, stream id)``.
    """

    def __init__(self, seed, n_streams, noise_dim, step, n_steps, law=None):
        self.seed = int(seed)
        self.n_streams = int(n_streams)
        self.noise_dim = int(noise_dim)
        self.step = float(step)
        self.n_steps = int(n_steps)
        self.law = law if law is not None else JumpLaw()
        self.horizon = self.n_steps * self.step
        self._sqrt_h = np.sqrt(self.step)
        owner, times, marks = _jump_events(
            self.law, self.horizon, self.seed, np.arange(self.n_streams), 0
        )
        k = np.clip(np.ceil(times / self.step).astype(np.int64) - 1, 0, max(self.n_steps - 1, 0))
        order = np.lexsort((times, owner, k))
        self.ev_particle = owner[order]
        self.ev_time = times[order]
        self.ev_mark = marks[order]
        self.ev_step = k[order]
        self._bounds = np.searchsorted(self.ev_step, np.arange(self.n_steps + 1))

    def brownian(self, k, rows=None):
        """Increments over step ``k`` for particles ``rows`` (default: all), shape (n, m)."""
        ids = np.arange(self.n_streams) if rows is None else np.asarray(rows)
        if self.noise_dim == 0:
            return np.zeros((ids.size, 0))
        return self._sqrt_h * crng.normals(self.seed, ids, k, crng.TAG_BROWNIAN, self.noise_dim)

    def events_in_step(self, k):
        """Events in ``(t_k, t_k + h]`` as (particle, time, mark), sorted by particle then time."""
        a, b = self._bounds[k], self._bounds[k + 1]
        return self.ev_particle[a:b], self.ev_time[a:b], self.ev_mark[a:b]

    def panel(self, stream_id):
        stream = crng.Stream(self.seed, stream_id)
        incs = np.empty((self.n_steps, self.noise_dim))
        for k in range(self.n_steps):
            stream.position = k
            incs[k] = sample_brownian(self.noise_dim, self.step, stream)
        sel = self.ev_particle == stream_id
        events = [(float(t), m) for t, m in zip(self.ev_time[sel], self.ev_mark[sel])]
        return NoisePanel(incs, events, self.seed, int(stream_id))

    def dump_events_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["particle", "step", "time"] + [f"mark_{i}" for i in range(self.law.mark_dim)])
            for i, k, t, m in zip(self.ev_particle, self.ev_step, self.ev_time, self.ev_mark):
                w.writerow([int(i), int(k), repr(float(t))] + [repr(float(v)) for v in m])


# --------------------------------------------------------------------------
# Isometry check


@dataclass
class IsometryReport:
    lhs: float
    lhs_se: float
    rhs: float
    z: float
    trials: int = field(default=0)


def _sq(values):
    values = np.asarray(values, dtype=float)
    return values**2 if values.ndim <= 1 else np.sum(values**2, axis=-1)


def verify_isometry(law, phi, horizon, trials, seed=0, n_time_nodes=32):
    """Compare ``E sum_jumps |phi(t, u)|^2`` with ``int_0^T int |phi|^2 v(du) ds``.

    ``phi(s, u)`` receives an array of times ``(n,)`` and marks ``(n, p)``
    and returns ``(n,)`` scalars or ``(n, d)`` vectors.
    """
    owner, times, marks = _jump_events(law, horizon, seed, np.arange(trials), 0)
    per_trial = np.zeros(trials)
    if owner.size:
        np.add.at(per_trial, owner, _sq(phi(times, marks)))
    lhs = float(per_trial.mean())
    lhs_se = float(per_trial.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0

    rhs = 0.0
    if law.total_rate > 0 and horizon > 0:
        nodes, weights = np.polynomial.legendre.leggauss(n_time_nodes)
        s_nodes = 0.5 * horizon * (nodes + 1.0)
        for s, wgt in zip(s_nodes, weights):
            inner = law.mark_expectation(lambda u: _sq(phi(np.full(u.shape[0], s), u)))
            rhs += 0.5 * horizon * wgt * float(inner)
        rhs *= law.total_rate
    diff = lhs - rhs
    if lhs_se > 0:
        z = diff / lhs_se
    else:
        z = 0.0 if abs(diff) <= 1e-15 else np.inf
    return IsometryReport(lhs, lhs_se, float(rhs), float(z), trials)
