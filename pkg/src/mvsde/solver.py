"""Interacting-particle time stepping for multi-valued mean-field SDEs with jumps.

One step of the standard-form system with scale ``eps``::

    Z   = X_k + sqrt(eps) * sum_{jumps in (t_k, t_k+h]} f(t_j, Z_pre, mu_k, u_j)
    Y   = Z + eps*b(t_k, X_k, mu_k)*h + sqrt(eps)*sigma(t_k, X_k, mu_k) dB
            - sqrt(eps)*h * int f(t_k, X_k, mu_k, u) v(du)
    X_{k+1} = J_{eps h}(Y),   dK = (Y - X_{k+1}) / eps

``mu_k`` is the empirical law of the ensemble at ``t_k``; ``K`` is accumulated
unscaled.  With ``eps = 1`` this is the original (unscaled) equation.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as crng
from .errors import BlowUpError, CapabilityError, InvalidInputError
from .measure import EmpiricalMeasure
from .monotone import Box, Halfspace, NormalCone
from .noise import JumpLaw, NoiseSource

SCHEMES = ("resolvent", "yosida", "resolvent_bridge")
BLOWUP_THRESHOLD = 1e8


@dataclass(frozen=True)
class SolverConfig:
    """Numerical parameters of one particle simulation.

    ``scheme`` is one of ``resolvent`` (implicit step on the operator),
    ``yosida`` (explicit step on its Yosida approximation with parameter
    ``yosida_lambda``) or ``resolvent_bridge`` (resolvent step preceded by a
    Brownian-bridge boundary correction; flat faces only).
    """

    n_particles: int
    step: float
    horizon: float
    scheme: str = "resolvent"
    epsilon: float = 1.0
    seed: int = 0
    yosida_lambda: float = 1e-2
    threads: int = 1
    retain_snapshots: bool = False
    snapshot_stride: int = 1
    compensator_marks: int = 1000
    tail_window: float = 0.0
    blowup_threshold: float = BLOWUP_THRESHOLD

    def __post_init__(self):
        errors = []
        if int(self.n_particles) < 1:
            errors.append("n_particles must be >= 1")
        if not (np.isfinite(self.step) and self.step > 0):
            errors.append("step must be > 0")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            errors.append("horizon must be > 0")
        elif self.step > 0 and not _is_multiple(self.horizon, self.step):
            errors.append("T not an integer multiple of h")
        if self.scheme not in SCHEMES:
            errors.append(f"unknown scheme {self.scheme!r}; valid: {SCHEMES}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            errors.append("epsilon must be > 0")
        if not self.yosida_lambda > 0:
            errors.append("yosida_lambda must be > 0")
        if int(self.threads) < 1:
            errors.append("threads must be >= 1")
        if int(self.snapshot_stride) < 1:
            errors.append("snapshot_stride must be >= 1")
        if not 0 <= self.tail_window <= self.horizon:
            errors.append("tail_window must lie in [0, horizon]")
        if errors:
            raise InvalidInputError("; ".join(errors))

    @property
    def n_steps(self):
        return int(round(self.horizon / self.step))


def _is_multiple(T, h):
    n = round(T / h)
    return n >= 1 and abs(n * h - T) <= 1e-9 * max(T, 1.0)


@dataclass
class ParticleEnsemble:
    """State of the particle system after ``step_index`` steps."""

    states: np.ndarray
    k_accum: np.ndarray
    k_variation: np.ndarray
    xi: np.ndarray
    increments: np.ndarray
    time: float = 0.0
    step_index: int = 0
    last_dk: np.ndarray = None

    @classmethod
    def start(cls, xi):
        xi = np.array(xi, dtype=float)
        if xi.ndim != 2:
            raise InvalidInputError(f"initial states must be (N, d), got shape {xi.shape}")
        if not np.all(np.isfinite(xi)):
            raise InvalidInputError("initial states must be finite")
        z = np.zeros_like(xi)
        return cls(states=xi.copy(), k_accum=z.copy(), k_variation=np.zeros(xi.shape[0]),
                   xi=xi, increments=z.copy(), last_dk=z.copy())

    @property
    def n(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def measure(self):
        return EmpiricalMeasure(self.states)

    def reconstruction_error(self, eps):
        """``max |X - (xi - eps*K + sum of applied increments)|``."""
        rebuilt = self.xi - eps * self.k_accum + self.increments
        return float(np.max(np.abs(self.states - rebuilt)))


def initial_states(spec, n, dim, seed=0):
    """Build an ``(n, dim)`` array of initial states.

    ``spec`` may be a scalar or ``(dim,)`` vector (all particles equal), an
    ``(n, dim)`` array, or ``{"kind": "gaussian", "mean": m, "std": s}``.
    Gaussian draws are a pure function of ``(seed, particle index)``.
    """
    if isinstance(spec, dict):
        kind = spec.get("kind", "gaussian")
        if kind != "gaussian":
            raise InvalidInputError(f"unknown initial law {kind!r}; valid: ['gaussian']")
        z = crng.normals(seed, np.arange(n), 0, crng.TAG_INITIAL, dim)
        return np.asarray(spec.get("mean", 0.0), dtype=float) + float(spec.get("std", 1.0)) * z
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full((n, dim), float(arr))
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise InvalidInputError(f"initial state has length {arr.shape[0]}, expected {dim}")
        return np.tile(arr, (n, 1))
    if arr.shape != (n, dim):
        raise InvalidInputError(f"initial states have shape {arr.shape}, expected {(n, dim)}")
    return arr.copy()


# --------------------------------------------------------------------------
# Single step


class _StepContext:
    """Per-run constants shared by every step."""

    def __init__(self, cfg, c, op, noise):
        self.cfg = cfg
        self.c = c
        self.op = op
        self.noise = noise
        self.eps = float(cfg.epsilon)
        self.sqrt_eps = math.sqrt(self.eps)
        self.h = float(cfg.step)
        self.marks = None
        if c.has_jumps and not c.jump_affine:
            m = int(cfg.compensator_marks)
            p = c.law.mark_dim
            lanes = (p + 1) // 2 + 1
            j = np.arange(m)
            z = crng.normals(cfg.seed, 0, 0, crng.TAG_COMPENSATOR, p, j * lanes)
            w = crng.uniforms(cfg.seed, 0, 0, crng.TAG_COMPENSATOR, 1, j * lanes + lanes - 1)[..., 0]
            self.marks = c.law.transform(z, w)
        if cfg.scheme == "resolvent_bridge":
            cs = op.convex_set if isinstance(op, NormalCone) else None
            if not isinstance(cs, (Halfspace, Box)):
                raise CapabilityError("resolvent_bridge needs a normal cone of a halfspace or box")
            self.faces = _faces(cs)
        self.pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _faces(cs):
    """Flat faces ``(unit normal, offset)`` with the set on the side ``<n, x> >= offset``."""
    if isinstance(cs, Halfspace):
        n = cs.unit_normal
        return [(n, cs.offset / np.linalg.norm(cs.normal))]
    faces = []
    d = cs.lo.shape[0]
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        if np.isfinite(cs.lo[i]):
            faces.append((e, float(cs.lo[i])))
        if np.isfinite(cs.hi[i]):
            faces.append((-e, -float(cs.hi[i])))
    return faces


def _apply_jumps(ctx, z, t_k, mu, rows, k):
    """Apply this step's jumps to the rows ``rows`` of ``z`` in time order, in place."""
    particle, times, marks = ctx.noise.events_in_step(k)
    if particle.size == 0:
        return
    a, b = rows.start, rows.stop
    lo, hi = np.searchsorted(particle, [a, b])
    particle, times, marks = particle[lo:hi], times[lo:hi], marks[lo:hi]
    if particle.size == 0:
        return
    first = np.r_[True, particle[1:] != particle[:-1]]
    start = np.maximum.accumulate(np.where(first, np.arange(particle.size), 0))
    rank = np.arange(particle.size) - start
    for r in range(int(rank.max()) + 1):
        sel = rank == r
        p = particle[sel] - a
        jump = ctx.c.jump(times[sel], z[p], mu, marks[sel])
        z[p] += ctx.sqrt_eps * jump


def _bridge_push(ctx, z, y, sig, rows, k):
    """Push ``y`` back along each face normal by the sampled bridge undershoot."""
    u = crng.uniforms(ctx.cfg.seed, np.arange(rows.start, rows.stop), k, crng.TAG_BRIDGE,
                      (len(ctx.faces) + 1) // 2)
    for f, (normal, offset) in enumerate(ctx.faces):
        a = z @ normal - offset
        b = y @ normal - offset
        s2 = ctx.eps * np.sum(np.einsum("nij,i->nj", sig, normal) ** 2, axis=1) * ctx.h
        low = 0.5 * (a + b - np.sqrt((b - a) ** 2 - 2.0 * s2 * np.log(u[:, f])))
        y = y + np.maximum(0.0, -low)[:, None] * normal
    return y


def _advance_rows(ctx, ens, mu, k, rows, y_out, x_out):
    t_k = k * ctx.h
    x = ens.states[rows]
    c, eps, h = ctx.c, ctx.eps, ctx.h
    z = x.copy()
    if c.has_jumps:
        _apply_jumps(ctx, z, t_k, mu, rows, k)
    y = z + eps * c.drift(t_k, x, mu) * h
    sig = None
    if c.sigma is not None or ctx.cfg.scheme == "resolvent_bridge":
        sig = c.diffusion(t_k, x, mu)
        db = ctx.noise.brownian(k, np.arange(rows.start, rows.stop))
        y = y + ctx.sqrt_eps * np.sum(sig * db[:, None, :], axis=-1)
    if c.has_jumps:
        y = y - ctx.sqrt_eps * h * c.compensator(t_k, x, mu, ctx.marks)
    scheme = ctx.cfg.scheme
    if scheme == "yosida":
        x_new = y - eps * h * ctx.op.yosida(ctx.cfg.yosida_lambda, x)
    elif scheme == "resolvent_bridge":
        y_push = _bridge_push(ctx, z, y, sig, rows, k)
        x_new = ctx.op.resolvent(eps * h, y_push)
    else:
        x_new = ctx.op.resolvent(eps * h, y)
    y_out[rows] = y
    x_out[rows] = x_new


def _chunks(n, threads):
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _check_finite(x, k, threshold):
    norms = np.sqrt(np.sum(x * x, axis=1))
    bad = ~np.isfinite(norms) | (norms > threshold)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise BlowUpError(i, k, float(norms[i]))


def step(ens, c, op, noise, cfg, ctx=None):
    """Advance ``ens`` by one step in place and return it.

    ``noise`` is the :class:`NoiseSource` of the run; ``ctx`` lets a caller
    reuse per-run constants across steps.
    """
    own = ctx is None
    ctx = ctx or _StepContext(cfg, c, op, noise)
    try:
        k = ens.step_index
        mu = ens.measure()
        y = np.empty_like(ens.states)
        x_new = np.empty_like(ens.states)
        chunks = _chunks(ens.n, cfg.threads)
        if ctx.pool is None or len(chunks) == 1:
            for rows in chunks:
                _advance_rows(ctx, ens, mu, k, rows, y, x_new)
        else:
            futures = [ctx.pool.submit(_advance_rows, ctx, ens, mu, k, rows, y, x_new)
                       for rows in chunks]
            for fut in futures:
                fut.result()
        _check_finite(x_new, k, cfg.blowup_threshold)
        dk = (y - x_new) / ctx.eps
        ens.increments += y - ens.states
        ens.k_accum += dk
        ens.k_variation += np.sqrt(np.sum(dk * dk, axis=1))
        ens.last_dk = dk
        ens.states = x_new
        ens.step_index = k + 1
        ens.time = (k + 1) * ctx.h
        return ens
    finally:
        if own:
            ctx.close()


# --------------------------------------------------------------------------
# Whole trajectories


@dataclass
class TrajectoryRecord:
    """Reduced statistics on the time grid, plus optional per-step snapshots.

    ``sup_mean_sq[k]`` is ``(1/N) sum_i max_{j<=k} |X^i_j|^2``.  ``snapshots``
    holds the states at the grid indices ``snapshot_steps`` (every
    ``snapshot_stride``-th point) and, with stride one, ``dk`` the increments
    of ``K`` over every step.  ``tail_sup`` is the
    per-particle ``max |X^i_t|`` over grid points with ``t >= T - tail_window``.
    """

    times: np.ndarray
    mean: np.ndarray
    mean_sq: np.ndarray
    mean_sq_se: np.ndarray
    sup_mean_sq: np.ndarray
    k_variation_mean: np.ndarray
    epsilon: float
    final: ParticleEnsemble
    snapshots: list = None
    dk: list = None
    tail_sup: np.ndarray = None
    snapshot_steps: list = None

    @property
    def step(self):
        return float(self.times[1] - self.times[0])

    def columns(self):
        cols = {
            "t": self.times,
            "mean_sq": self.mean_sq,
            "mean_sq_se": self.mean_sq_se,
            "sup_mean_sq": self.sup_mean_sq,
            "k_variation_mean": self.k_variation_mean,
        }
        for j in range(self.mean.shape[1]):
            cols[f"mean_{j}"] = self.mean[:, j]
        return cols


class _Recorder:
    def __init__(self, cfg, ens):
        n = cfg.n_steps + 1
        d = ens.dim
        self.cfg = cfg
        self.mean = np.empty((n, d))
        self.mean_sq = np.empty(n)
        self.mean_sq_se = np.empty(n)
        self.sup_mean_sq = np.empty(n)
        self.k_var = np.empty(n)
        self.running_sup = np.zeros(ens.n)
        self.tail_start = cfg.n_steps - int(round(cfg.tail_window / cfg.step))
        self.tail_sup = np.zeros(ens.n) if cfg.tail_window > 0 else None
        self.stride = int(cfg.snapshot_stride)
        self.snapshots = [ens.states.copy()] if cfg.retain_snapshots else None
        self.snapshot_steps = [0] if cfg.retain_snapshots else None
        self.dk = [] if cfg.retain_snapshots and self.stride == 1 else None
        self.take(ens)

    def take(self, ens):
        k = ens.step_index
        sq = np.sum(ens.states**2, axis=1)
        self.mean[k] = ens.states.mean(axis=0)
        self.mean_sq[k] = sq.mean()
        self.mean_sq_se[k] = sq.std(ddof=1) / math.sqrt(sq.size) if sq.size > 1 else 0.0
        np.maximum(self.running_sup, sq, out=self.running_sup)
        self.sup_mean_sq[k] = self.running_sup.mean()
        self.k_var[k] = ens.k_variation.mean()
        if self.tail_sup is not None and k >= self.tail_start:
            np.maximum(self.tail_sup, np.sqrt(sq), out=self.tail_sup)
        if self.snapshots is not None and k > 0 and k % self.stride == 0:
            self.snapshots.append(ens.states.copy())
            self.snapshot_steps.append(k)
        if self.dk is not None and k > 0:
            self.dk.append(ens.last_dk.copy())

    def record(self, ens):
        return TrajectoryRecord(
            times=np.arange(self.cfg.n_steps + 1) * self.cfg.step,
            mean=self.mean, mean_sq=self.mean_sq, mean_sq_se=self.mean_sq_se,
            sup_mean_sq=self.sup_mean_sq, k_variation_mean=self.k_var,
            epsilon=float(self.cfg.epsilon), final=ens,
            snapshots=self.snapshots, dk=self.dk, tail_sup=self.tail_sup,
            snapshot_steps=self.snapshot_steps,
        )


def make_noise(cfg, c):
    law = c.law if c.has_jumps else JumpLaw(mark_dim=c.law.mark_dim)
    return NoiseSource(cfg.seed, cfg.n_particles, c.noise_dim, cfg.step, cfg.n_steps, law)


def _prepare(cfg, c, xi):
    xi = initial_states(xi, cfg.n_particles, c.dim, cfg.seed)
    return ParticleEnsemble.start(xi)


def simulate(cfg, c, op, xi, noise=None, on_step=None):
    """Run ``cfg.n_steps`` steps from initial states ``xi`` (see :func:`initial_states`)."""
    noise = noise or make_noise(cfg, c)
    ens = _prepare(cfg, c, xi)
    rec = _Recorder(cfg, ens)
    ctx = _StepContext(cfg, c, op, noise)
    try:
        for _ in range(cfg.n_steps):
            step(ens, c, op, noise, cfg, ctx)
            rec.take(ens)
            if on_step is not None:
                on_step(ens)
    finally:
        ctx.close()
    return rec.record(ens)


@dataclass
class CoupledRecord:
    """Two systems driven by the same noise and their running sup distance."""

    full: TrajectoryRecord
    averaged: TrajectoryRecord
    times: np.ndarray
    sup_dist: np.ndarray
    sup_dist_se: np.ndarray
    per_particle_sup: np.ndarray = field(repr=False, default=None)

    @property
    def terminal(self):
        return float(self.sup_dist[-1]), float(self.sup_dist_se[-1])


def simulate_coupled(cfg, c_full, c_avg, op, xi):
    """Step the original and averaged systems in lockstep on shared noise.

    ``sup_dist[k] = (1/N) sum_i max_{j<=k} |X^i_j - Y^i_j|^2`` over grid points.
    """
    if c_full.dim != c_avg.dim or c_full.noise_dim != c_avg.noise_dim:
        raise InvalidInputError("full and averaged systems must share state and noise dimensions")
    noise = make_noise(cfg, c_full)
    ens_x = _prepare(cfg, c_full, xi)
    ens_y = _prepare(cfg, c_avg, xi)
    rec_x, rec_y = _Recorder(cfg, ens_x), _Recorder(cfg, ens_y)
    ctx_x = _StepContext(cfg, c_full, op, noise)
    ctx_y = _StepContext(cfg, c_avg, op, noise)
    n = cfg.n_steps + 1
    running = np.zeros(ens_x.n)
    dist = np.zeros(n)
    dist_se = np.zeros(n)
    try:
        for k in range(1, n):
            step(ens_x, c_full, op, noise, cfg, ctx_x)
            step(ens_y, c_avg, op, noise, cfg, ctx_y)
            rec_x.take(ens_x)
            rec_y.take(ens_y)
            np.maximum(running, np.sum((ens_x.states - ens_y.states) ** 2, axis=1), out=running)
            dist[k] = running.mean()
            dist_se[k] = running.std(ddof=1) / math.sqrt(running.size) if running.size > 1 else 0.0
    finally:
        ctx_x.close()
        ctx_y.close()
    return CoupledRecord(rec_x.record(ens_x), rec_y.record(ens_y),
                         np.arange(n) * cfg.step, dist, dist_se, running)


@dataclass
class FlowMonotonicityReport:
    min_inner: float
    n_pairs: int
    worst_step: int
    worst_particle: int

    def passed(self, tol=1e-12):
        return self.min_inner >= -tol


def discrete_flow_monotonicity(cfg, c, op, xi_a, xi_b):
    """Minimum of ``<X_{k+1} - X'_{k+1}, dK - dK'>`` for two ensembles on shared noise."""
    noise = make_noise(cfg, c)
    ea, eb = _prepare(cfg, c, xi_a), _prepare(cfg, c, xi_b)
    ctx_a = _StepContext(cfg, c, op, noise)
    ctx_b = _StepContext(cfg, c, op, noise)
    worst = (np.inf, -1, -1)
    try:
        for k in range(cfg.n_steps):
            step(ea, c, op, noise, cfg, ctx_a)
            step(eb, c, op, noise, cfg, ctx_b)
            inner = np.sum((ea.states - eb.states) * (ea.last_dk - eb.last_dk), axis=1)
            i = int(np.argmin(inner))
            if inner[i] < worst[0]:
                worst = (float(inner[i]), k, i)
    finally:
        ctx_a.close()
        ctx_b.close()
    return FlowMonotonicityReport(worst[0], cfg.n_steps * ea.n, worst[1], worst[2])
