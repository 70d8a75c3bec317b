"""Path simulation for all three model families under P and P*.

The discrete generative model is chosen so that exact Bayes filtering and
the discrete martingale identities hold in the simulated model itself, not
only in the continuous-time limit:

  * coefficients are frozen at each step's left endpoint;
  * per step, the mark counts are Poisson(eta_j dt) under P; under P* they
    are sampled by thinning a Poisson envelope, which reproduces
    Poisson(eta*_j dt) exactly with the state-dependent tilted weights;
  * the asset factor per step is (1 + drift dt + sigma1 dW1) times
    prod_j (1 + K1_j)^{count_j} with K1 frozen at the left endpoint
    (a log-Euler variant for the continuous factor is available);
  * the latent factor applies jump displacements mark by mark (S-moving
    marks in ascending mark order first, then X-only marks, re-evaluating
    K0 at the current position), then the diffusion or chain move.

Randomness is counter-based: paths are grouped into fixed-size blocks and
block b of stream r draws from Philox seeded by SeedSequence(seed,
spawn_key=(r, b)). Results are written to pre-indexed slots, so the worker
count cannot change any output bit.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .errors import BoundViolationError, MeasureSignError, StepSizeError
from .models import MEASURE_P, MEASURE_PSTAR, TimeGrid, _as_measure
from .models import _scan_lattice
from .structure import _alpha_block

BLOCK_SIZE = 256
ENVELOPE_FACTOR = 1.5


def n_workers():
    """Worker count for block-level parallelism (THREADS env var)."""
    try:
        return max(1, int(os.environ.get("THREADS", "1")))
    except ValueError:
        return 1


class RngStream:
    """Counter-based random stream: (seed, stream id) -> per-block rngs."""

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)

    def block_rng(self, block):
        ss = np.random.SeedSequence(entropy=self.seed,
                                    spawn_key=(self.stream, int(block)))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream):
        return RngStream(self.seed, stream)


@dataclass
class PathSample:
    """One simulated trajectory of (X, S) with its driving noise."""

    grid: TimeGrid
    measure: str
    x_path: np.ndarray             # (N+1,)
    s_path: np.ndarray             # (N+1,)
    dW0: np.ndarray                # (N,)
    dW1: np.ndarray                # (N,)
    jump_events: list              # [(step, mark index)], count-expanded
    counts: Optional[np.ndarray]   # (N, m) event counts per step and mark
    stream: int = 0
    path_index: int = 0


@dataclass
class EnsembleResult:
    """All paths of one run as stacked arrays (path axis first)."""

    grid: TimeGrid
    measure: str
    x: np.ndarray                  # (n, N+1)
    s: np.ndarray                  # (n, N+1)
    dW0: np.ndarray                # (n, N)
    dW1: np.ndarray                # (n, N)
    counts: np.ndarray             # (n, N, m)
    seed: int = 0
    stream: int = 0
    t_offset: float = 0.0

    @property
    def n_paths(self):
        return self.s.shape[0]

    def path(self, i):
        events = [(int(k), int(j))
                  for k, j in np.argwhere(self.counts[i] > 0)
                  for _ in range(int(self.counts[i, k, j]))]
        return PathSample(self.grid, self.measure, self.x[i], self.s[i],
                          self.dW0[i], self.dW1[i], events, self.counts[i],
                          stream=self.stream, path_index=i)


# ---------------------------------------------------------------------------
# envelope for P* thinning
# ---------------------------------------------------------------------------

def _thinning_envelope(spec, horizon, t_offset=0.0):
    """Per-mark envelope intensities: ENVELOPE_FACTOR times the largest
    tilted weight over the model's scan lattice (states where the
    quadratic variation vanishes keep the untilted weight)."""
    m = spec.marks.m
    if m == 0:
        return np.zeros(0)
    ts, xs, ss = _scan_lattice(spec, horizon)
    best = np.zeros(m)
    for t in ts:
        for x in xs:
            for s in ss:
                w = _eta_star_vec(spec, float(t) + t_offset,
                                  np.array([float(x)]),
                                  np.array([float(s)]))[:, 0]
                best = np.maximum(best, w)
    return ENVELOPE_FACTOR * np.maximum(best, 0.0)


# ---------------------------------------------------------------------------
# vectorized per-block kernels
# ---------------------------------------------------------------------------

def _eta_star_vec(spec, t, x, s):
    """Tilted weights per mark over a block: (m, B)."""
    alpha, _ = _alpha_block(spec, t, x, s)
    k1 = spec.k1_values(t, x, s)
    z = s[None, :] * k1
    return (1.0 - alpha[None, :] * z) * spec.marks.weights[:, None]


def _classify_marks(spec, horizon, t_offset=0.0):
    """Static split of marks into S-moving and X-only, by a lattice scan
    of K1; the split fixes the X displacement order inside a step."""
    m = spec.marks.m
    moving = np.zeros(m, dtype=bool)
    ts, xs, ss = _scan_lattice(spec, horizon)
    for t in ts:
        for x in xs:
            for s in ss:
                k1 = spec.k1_values(float(t) + t_offset, float(x), float(s))
                moving |= np.abs(k1) > 1e-14
    order = [j for j in range(m) if moving[j]] + \
            [j for j in range(m) if not moving[j]]
    return np.array(order, dtype=int)


def _simulate_block(spec, grid, measure, rng, B, x0, s0, t_offset,
                    envelope, mark_order, chain_P, log_euler,
                    use_prior=True):
    """Simulate one block of B paths; returns stacked arrays."""
    N = grid.n_steps
    dt = grid.dt
    m = spec.marks.m
    finite = spec.is_finite_state
    rho = spec.coefficients.rho
    c = spec.coefficients

    x = np.full(B, float(x0))
    s = np.full(B, float(s0))
    if finite:
        states = spec.x_states
        cum = np.cumsum(chain_P, axis=1)
        prior = getattr(spec, "x0_prior", None) if use_prior else None
        if prior is not None:
            u_init = rng.random(B)
            idx = (u_init[:, None] > np.cumsum(prior)[None, :]) \
                .sum(axis=1)
            x = states[idx].copy()
        else:
            idx = np.full(B, spec.state_index(float(x0)), dtype=int)

    xs = np.empty((B, N + 1))
    ss = np.empty((B, N + 1))
    dW0s = np.zeros((B, N))
    dW1s = np.zeros((B, N))
    counts_out = np.zeros((B, N, m), dtype=np.int64)
    xs[:, 0] = x
    ss[:, 0] = s
    sqdt = np.sqrt(dt)

    for k in range(N):
        t = t_offset + grid.times[k]

        # -- draws, in a fixed order ------------------------------------
        if not finite:
            z0 = rng.standard_normal(B)
        if spec.has_brownian_s:
            z1 = rng.standard_normal(B)
        if m:
            counts = np.empty((B, m), dtype=np.int64)
            if measure == MEASURE_P:
                lam = spec.marks.weights * dt
                for j in range(m):
                    counts[:, j] = rng.poisson(lam[j], B) if lam[j] > 0 \
                        else 0
            else:
                eta_star = _eta_star_vec(spec, t, x, s)      # (m, B)
                if np.any(eta_star < -1e-12):
                    raise MeasureSignError(
                        f"negative tilted weight at step {k}; the minimal "
                        "martingale measure is not a probability here")
                eta_star = np.maximum(eta_star, 0.0)
                for j in range(m):
                    if envelope[j] <= 0.0:
                        if np.any(eta_star[j] > 0):
                            raise BoundViolationError(
                                "thinning envelope is zero but eta* > 0; "
                                "widen the scan lattice")
                        counts[:, j] = 0
                        continue
                    ratio = eta_star[j] / envelope[j]
                    if np.any(ratio > 1.0):
                        raise BoundViolationError(
                            "tilted weight exceeds its thinning envelope; "
                            "the scan lattice understates eta*")
                    raw = rng.poisson(envelope[j] * dt, B)
                    counts[:, j] = rng.binomial(raw, ratio)
            counts_out[:, k, :] = counts
        if finite:
            u = rng.random(B)

        # -- increments ---------------------------------------------------
        if not finite:
            dW0 = sqdt * z0
            dW0s[:, k] = dW0
        if spec.has_brownian_s:
            if finite:
                dW1 = sqdt * z1
            else:
                dW1 = sqdt * (rho * z0 + np.sqrt(1.0 - rho * rho) * z1)
            dW1s[:, k] = dW1

        # -- price update (left-frozen coefficients) ----------------------
        factor = np.ones(B)
        if spec.has_brownian_s:
            sig1 = np.broadcast_to(
                np.asarray(spec.sigma1_at(t, s), dtype=float), s.shape)
            if measure == MEASURE_P:
                drift = np.broadcast_to(
                    np.asarray(spec.mu1_at(t, x, s), dtype=float), s.shape)
            else:
                alpha, _ = _alpha_block(spec, t, x, s)
                drift = spec.mu1_at(t, x, s) - alpha * s * sig1 ** 2
                drift = np.broadcast_to(np.asarray(drift, dtype=float),
                                        s.shape)
            if log_euler:
                factor = np.exp((drift - 0.5 * sig1 ** 2) * dt
                                + sig1 * dW1)
            else:
                factor = 1.0 + drift * dt + sig1 * dW1
                if np.any(factor <= 0.0):
                    raise StepSizeError(
                        "nonpositive price factor in the Euler step; "
                        "use a smaller dt or the log-Euler option")
        if m:
            k1 = spec.k1_values(t, x, s)                     # (m, B)
            if np.any(1.0 + k1 <= 0.0):
                raise StepSizeError("jump factor 1 + K1 <= 0 on a path")
            jump_factor = np.prod(
                (1.0 + k1.T) ** counts, axis=1)
            factor = factor * jump_factor
        s_new = s * factor

        # -- latent update -------------------------------------------------
        if m and np.any(counts):
            x = _apply_x_jumps(spec, t, x, counts, mark_order, finite)
            if finite:
                idx = np.argmin(np.abs(states[None, :] - x[:, None]),
                                axis=1)
        if finite:
            nxt = (u[:, None] > cum[idx]).sum(axis=1)
            idx = nxt
            x = states[idx]
        else:
            mu0 = np.broadcast_to(
                np.asarray(c.mu0(t=t, x=x, s=s), dtype=float), x.shape)
            sg0 = np.broadcast_to(
                np.asarray(c.sigma0(t=t, x=x, s=s), dtype=float), x.shape)
            x = x + mu0 * dt + sg0 * dW0

        s = s_new
        xs[:, k + 1] = x
        ss[:, k + 1] = s

    return xs, ss, dW0s, dW1s, counts_out


def _apply_x_jumps(spec, t, x, counts, mark_order, finite):
    """Apply per-event X displacements in the documented order, snapping
    to the state grid in finite mode and re-evaluating K0 as X moves."""
    if not np.any(counts):
        return x
    x = x.copy()
    for j in mark_order:
        cj = counts[:, j].copy()
        zeta = spec.marks.marks[j]
        while np.any(cj > 0):
            live = cj > 0
            disp = spec.coefficients.K0(t=t, x=x[live], s=0.0, zeta=zeta)
            disp = np.broadcast_to(np.asarray(disp, dtype=float),
                                   x[live].shape)
            if np.any(disp != 0.0):
                moved = x[live] + disp
                if finite:
                    si = np.argmin(
                        np.abs(spec.x_states[None, :] - moved[:, None]),
                        axis=1)
                    moved = spec.x_states[si]
                x[live] = moved
            cj[live] -= 1
    return x


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def simulate_ensemble(spec, grid, measure, n_paths, rng, x0=None, s0=None,
                      t_offset=0.0, log_euler=False):
    """Simulate n_paths trajectories and return stacked arrays.

    ``rng`` is an RngStream; path block b draws from rng.block_rng(b).
    ``x0``/``s0``/``t_offset`` override the spec start (used by the
    Feynman-Kac pricer to launch from interior grid points). With
    x0=None the start state is drawn from spec.x0_prior when one is set;
    an explicit x0 always means a point mass there.
    """
    measure = _as_measure(measure)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    use_prior = x0 is None      # an explicit start point is a point mass
    x0 = spec.x0 if x0 is None else x0
    s0 = spec.s0 if s0 is None else s0
    if s0 <= 0:
        raise ValueError("s0 must be positive")
    N = grid.n_steps
    m = spec.marks.m

    envelope = _thinning_envelope(spec, grid.horizon, t_offset) \
        if (m and measure == MEASURE_PSTAR) else np.zeros(m)
    mark_order = _classify_marks(spec, grid.horizon, t_offset) if m \
        else np.zeros(0, dtype=int)
    chain_P = expm(spec.x_generator * grid.dt) if spec.is_finite_state \
        else None

    xs = np.empty((n_paths, N + 1))
    ss = np.empty((n_paths, N + 1))
    dW0s = np.empty((n_paths, N))
    dW1s = np.empty((n_paths, N))
    counts = np.empty((n_paths, N, m), dtype=np.int64)

    blocks = [(b, lo, min(lo + BLOCK_SIZE, n_paths))
              for b, lo in enumerate(range(0, n_paths, BLOCK_SIZE))]

    def run_block(job):
        b, lo, hi = job
        out = _simulate_block(spec, grid, measure, rng.block_rng(b),
                              hi - lo, x0, s0, t_offset, envelope,
                              mark_order, chain_P, log_euler, use_prior)
        xs[lo:hi], ss[lo:hi], dW0s[lo:hi], dW1s[lo:hi], counts[lo:hi] = out

    workers = n_workers()
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_block, blocks))
    else:
        for job in blocks:
            run_block(job)

    return EnsembleResult(grid, measure, xs, ss, dW0s, dW1s, counts,
                          seed=rng.seed, stream=rng.stream,
                          t_offset=t_offset)


def simulate_paths(spec, grid, measure, n_paths, rng, **kw):
    """Simulate and return a list of PathSample (see simulate_ensemble)."""
    ens = simulate_ensemble(spec, grid, measure, n_paths, rng, **kw)
    return [ens.path(i) for i in range(n_paths)]


# ---------------------------------------------------------------------------
# innovation process
# ---------------------------------------------------------------------------

def innovation_increments(spec, path, filter_drift):
    """Innovation increments dI = dW1 + (mu1(X) - filtered mu1)/sigma1 dt.

    ``filter_drift`` holds the filter's predicted relative drift per step
    (left limits, length n_steps). Under the observation filtration the
    cumulated I is a Brownian motion.
    """
    grid = path.grid
    N = grid.n_steps
    filter_drift = np.asarray(filter_drift, dtype=float)
    if filter_drift.shape != (N,):
        raise ValueError("filter_drift must have one value per step")
    out = np.empty(N)
    c2 = spec.coefficients.c2
    for k in range(N):
        t = grid.times[k]
        s = path.s_path[k]
        sig1 = spec.sigma1_at(t, s)
        if sig1 < c2:
            raise BoundViolationError(
                f"sigma1={sig1:.6g} below its lower bound at step {k}")
        mu = spec.mu1_at(t, path.x_path[k], s)
        out[k] = path.dW1[k] + (mu - filter_drift[k]) / sig1 * grid.dt
    return out


# ---------------------------------------------------------------------------
# CSV dump
# ---------------------------------------------------------------------------

def write_paths_csv(fname, paths):
    """Dump paths: one row per (path, step); steps with multiple jump
    events repeat with zeroed increments and one mark per extra row."""
    with open(fname, "w") as fh:
        fh.write("path_id,step,t,x,s,dW0,dW1,jump_mark\n")
        for pid, p in enumerate(paths):
            N = p.grid.n_steps
            by_step = {}
            for step, mark in p.jump_events:
                by_step.setdefault(step, []).append(mark)
            for k in range(N + 1):
                dw0 = p.dW0[k] if k < N else 0.0
                dw1 = p.dW1[k] if k < N else 0.0
                marks = by_step.get(k, [-1])
                fh.write("%d,%d,%.12g,%.17g,%.17g,%.17g,%.17g,%d\n" % (
                    pid, k, p.grid.times[k], p.x_path[k], p.s_path[k],
                    dw0, dw1, marks[0]))
                for extra in marks[1:]:
                    fh.write("%d,%d,%.12g,%.17g,%.17g,0,0,%d\n" % (
                        pid, k, p.grid.times[k], p.x_path[k], p.s_path[k],
                        extra))
    return fname
