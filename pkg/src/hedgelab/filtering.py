"""Filters for the latent state under P and under P*.

The engines implement discrete-time prediction-correction (split-step)
filtering that is exactly Bayes for the discrete generative model used by
the simulator:

  correction   reweight the current law by the per-state likelihood of the
               step's observation: a Gaussian factor for the residual
               continuous return (drift mu1 under P, the premium-adjusted
               drift under P*) and Poisson factors for the pooled jump-atom
               counts (weights nu under P, tilted nu* under P*);
  transition   move the law through the common-jump displacements implied
               by the observed atoms (attributed to marks by intensity
               ratios), the unobserved X-only jumps (truncated Poisson
               composition), and the chain semigroup expm(Q dt).

Two engines share this structure: an exact finite-state engine (the
oracle) and a particle engine (sampling the same kernel, importance
weighted, with systematic resampling). A vectorized finite-state driver
handles large ensembles when the jump geometry is state-only (constant K1
per state and mark, no X displacement at jumps).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy import stats

from .errors import (
    EmptyCloudError, FilterStateError, StepSizeError, SupportError,
)
from .models import MEASURE_P, MEASURE_PSTAR, _as_measure
from .structure import (
    PooledAtoms, _alpha_block, alpha_F_at, nu_star_H_at, pooled_atoms,
)

# residual tolerance for pure-jump observation consistency
RESIDUAL_TOL = 1e-6
# per-step cap on enumerated jump multiplicities in the exact engine
ENUM_CAP = 4
# resampling threshold: resample when ESS < N * this
ESS_FRACTION = 0.5


# ---------------------------------------------------------------------------
# filter state and observations
# ---------------------------------------------------------------------------

@dataclass
class FilterState:
    """Conditional law of the latent factor given observations."""

    mode: str                      # "finite" or "particle"
    measure: str                   # "P" or "Pstar"
    x_values: np.ndarray           # states (finite) or positions (particle)
    weights: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.measure = _as_measure(self.measure)
        self.x_values = np.asarray(self.x_values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.validate()

    def validate(self):
        if self.weights.shape != self.x_values.shape:
            raise FilterStateError("weights and x_values differ in shape")
        if self.weights.size == 0:
            raise EmptyCloudError("filter has no support points")
        if np.any(self.weights < 0):
            raise FilterStateError("negative filter weight")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise FilterStateError(
                f"filter weights sum to {self.weights.sum():.15g}, not 1")

    def expectation(self, values):
        return float(np.dot(self.weights, values))


def finite_prior(spec, measure):
    """Initial finite-state filter: the spec's start-state law."""
    probs = spec.x0_prior if getattr(spec, "x0_prior", None) is not None \
        else None
    if probs is None:
        probs = np.zeros(spec.n_states)
        probs[spec.state_index(spec.x0)] = 1.0
    return FilterState("finite", measure, spec.x_states,
                       np.asarray(probs, dtype=float), 0.0)


def particle_prior(spec, measure, n_particles, rng):
    """Initial particle cloud sampled from the start-state law."""
    if n_particles < 1:
        raise EmptyCloudError("particle filter needs at least one particle")
    if spec.is_finite_state:
        probs = spec.x0_prior if getattr(spec, "x0_prior", None) is not None \
            else None
        if probs is None:
            xs = np.full(n_particles, float(spec.x0))
        else:
            idx = rng.choice(spec.n_states, size=n_particles, p=probs)
            xs = spec.x_states[idx]
    else:
        xs = np.full(n_particles, float(spec.x0))
    w = np.full(n_particles, 1.0 / n_particles)
    return FilterState("particle", measure, xs, w, 0.0)


@dataclass
class StepObservation:
    """What the hedger sees over one step: pooled jump-atom counts and the
    residual continuous relative return."""

    t: float
    s: float                       # price at the step's left endpoint
    dt: float
    atom_counts: np.ndarray        # (A,)
    pooled: PooledAtoms
    r: float                       # residual continuous return
    s_next: float


def make_observation(spec, t, s, s_next, counts_row, true_x, dt):
    """Build the observation for one step from simulator output.

    ``counts_row`` holds per-mark event counts; the realized jump sizes
    follow the true state's mark-to-atom map. The residual return divides
    out the pooled representative jump factors, so it does not depend on
    the latent state beyond pooling tolerance.
    """
    pooled = pooled_atoms(spec, t, s)
    A = pooled.n_atoms
    atom_counts = np.zeros(A, dtype=np.int64)
    if spec.marks.m and np.any(counts_row):
        i = spec.state_index(true_x) if spec.is_finite_state else None
        if i is None:
            raise FilterStateError(
                "observation building needs finite-state mode")
        for j in range(spec.marks.m):
            c = int(counts_row[j])
            if c == 0:
                continue
            a = pooled.atom_of[i, j]
            if a >= 0:
                atom_counts[a] += c
    factor = float(np.prod((1.0 + pooled.k_rel) ** atom_counts)) \
        if A else 1.0
    r = s_next / s / factor - 1.0
    return StepObservation(t, s, dt, atom_counts, pooled, r, s_next)


def make_observations(spec, path):
    """Observations for every step of a simulated path."""
    grid = path.grid
    out = []
    for k in range(grid.n_steps):
        counts_row = path.counts[k] if path.counts is not None else \
            np.bincount([j for st, j in path.jump_events if st == k],
                        minlength=spec.marks.m)
        out.append(make_observation(
            spec, grid.times[k], path.s_path[k], path.s_path[k + 1],
            counts_row, path.x_path[k], grid.dt))
    return out


# ---------------------------------------------------------------------------
# per-state likelihoods
# ---------------------------------------------------------------------------

def _state_drifts(spec, t, s, x_values, measure):
    """Continuous-return drift per state: mu1 under P, premium-adjusted
    under P* (zero when S has no Brownian driver)."""
    x_values = np.asarray(x_values, dtype=float)
    if not spec.has_brownian_s:
        return np.zeros(x_values.shape)
    s_arr = np.broadcast_to(float(s), x_values.shape)
    mu = np.broadcast_to(np.asarray(
        spec.mu1_at(t, x_values, s_arr), dtype=float), x_values.shape)
    if measure == MEASURE_P:
        return mu
    alpha, _ = _alpha_block(spec, t, x_values, np.asarray(s_arr))
    sig1 = spec.sigma1_at(t, s)
    return mu - alpha * s * sig1 ** 2


def _log_likelihoods(spec, obs, x_values, measure, log_euler=False):
    """Log-likelihood of one observation per hypothesis point (up to a
    common additive constant)."""
    x_values = np.asarray(x_values, dtype=float)
    n = x_values.size
    out = np.zeros(n)
    t, s, dt = obs.t, obs.s, obs.dt

    if spec.has_brownian_s:
        sig1 = spec.sigma1_at(t, s)
        var = sig1 * sig1 * dt
        drift = _state_drifts(spec, t, s, x_values, measure)
        if log_euler:
            resid = np.log1p(obs.r) - (drift - 0.5 * sig1 * sig1) * dt
        else:
            resid = obs.r - drift * dt
        out -= resid * resid / (2.0 * var)
    elif abs(obs.r) > RESIDUAL_TOL:
        raise SupportError(
            f"residual return {obs.r:.3e} with no continuous driver: the "
            "observed move is impossible at every state")

    if obs.pooled.n_atoms:
        nu = obs.pooled.state_weights if measure == MEASURE_P \
            else obs.pooled.star_weights
        # rows of nu are per spec.x_states; map hypothesis points to rows
        rows = _state_rows(spec, x_values)
        lam = np.maximum(nu[rows], 0.0) * dt          # (n, A)
        c = obs.atom_counts[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(c > 0, c * np.log(lam), 0.0) - lam
        term = np.where((c > 0) & (lam == 0.0), -np.inf, term)
        out += term.sum(axis=1)
    elif np.any(obs.atom_counts):
        raise SupportError("observed jump but the model has no atoms")
    return out


def _state_rows(spec, x_values):
    return np.argmin(
        np.abs(spec.x_states[None, :] - np.asarray(x_values)[:, None]),
        axis=1)


# ---------------------------------------------------------------------------
# exact finite-state engine
# ---------------------------------------------------------------------------

def _truncated_poisson_weights(lam, cap=ENUM_CAP):
    """pmf(0..cap-1) plus the lumped tail at cap; sums to one exactly."""
    w = [stats.poisson.pmf(c, lam) for c in range(cap)]
    w.append(max(stats.poisson.sf(cap - 1, lam), 0.0))
    return np.asarray(w)


def _apply_mark_map(spec, t, x, mark_j, times):
    """Apply mark_j's X displacement `times` times, re-evaluating K0."""
    zeta = spec.marks.marks[mark_j]
    for _ in range(times):
        disp = float(spec.coefficients.K0(t=t, x=x, s=0.0, zeta=zeta))
        x = spec.snap_state(x + disp)
    return x


def _static_mark_order(spec, t, s):
    """S-moving marks (ascending), then the rest: the simulator's X
    displacement order."""
    k1 = np.max(np.abs(
        spec.k1_values(t, spec.x_states, s)), axis=1)
    moving = [j for j in range(spec.marks.m) if k1[j] > 1e-14]
    rest = [j for j in range(spec.marks.m) if k1[j] <= 1e-14]
    return moving + rest


def _jump_transition_row(spec, obs, i, measure):
    """Distribution of the post-jump state index, for pre-jump state i,
    given the observed atom counts.

    Observed atoms are attributed to marks by their (tilted) intensity
    ratios; unobserved marks (invisible in state i) contribute truncated
    Poisson counts. Displacements compose in the simulator's mark order.
    """
    t, s, dt = obs.t, obs.s, obs.dt
    pooled = obs.pooled
    total_obs = int(obs.atom_counts.sum())
    if total_obs > ENUM_CAP:
        raise StepSizeError(
            f"{total_obs} observed jumps in one step exceeds the exact "
            "engine's enumeration cap; use a smaller dt")
    m = spec.marks.m
    eta = spec.marks.weights
    x_i = float(spec.x_states[i])
    z_i = s * spec.k1_values(t, x_i, s)
    if measure == MEASURE_PSTAR:
        alpha_i, _ = _alpha_block(spec, t, np.array([x_i]),
                                  np.array([s]))
        rate = np.maximum((1.0 - float(alpha_i[0]) * z_i) * eta, 0.0)
    else:
        rate = eta.copy()

    # per-mark count alternatives: fixed multiplicities for attributed
    # marks, truncated Poisson for invisible ones
    alternatives = []                   # list per mark: [(count, prob)]
    for j in range(m):
        a = pooled.atom_of[i, j]
        if a >= 0:
            alternatives.append(None)   # resolved by attribution below
        else:
            lam = rate[j] * dt
            w = _truncated_poisson_weights(lam)
            alternatives.append([(c, w[c]) for c in range(w.size)
                                 if w[c] > 0])

    # attribution of each atom's count to its candidate marks; within an
    # atom the tilt factor (1 - alpha z) is common to every candidate, so
    # the ratios match the untilted ones, but the tilted rates are used
    # for literalness
    atom_groups = []
    for a in range(pooled.n_atoms):
        c_a = int(obs.atom_counts[a])
        cand = [j for j in range(m) if pooled.atom_of[i, j] == a]
        if c_a == 0:
            atom_groups.append([({}, 1.0)])
            continue
        if not cand:
            return {}                   # impossible under this state
        pj = rate[cand]
        tot = pj.sum()
        if tot <= 0:
            return {}
        pj = pj / tot
        combos = []
        for alloc in _compositions(c_a, len(cand)):
            prob = _multinomial_pmf(alloc, pj)
            combos.append((dict(zip(cand, alloc)), prob))
        atom_groups.append(combos)

    order = _static_mark_order(spec, t, s)
    dest = {}

    def walk(g, counts, prob):
        if prob == 0.0:
            return
        if g == len(atom_groups):
            _walk_invisible(0, counts, prob)
            return
        for alloc, p in atom_groups[g]:
            merged = dict(counts)
            merged.update(alloc)
            walk(g + 1, merged, prob * p)

    def _walk_invisible(jpos, counts, prob):
        if jpos == m:
            x = x_i
            for j in order:
                c = counts.get(j, 0)
                if c:
                    x = _apply_mark_map(spec, obs.t, x, j, c)
            idx = spec.state_index(x)
            dest[idx] = dest.get(idx, 0.0) + prob
            return
        if alternatives[jpos] is None:
            _walk_invisible(jpos + 1, counts, prob)
            return
        for c, p in alternatives[jpos]:
            merged = dict(counts)
            merged[jpos] = c
            _walk_invisible(jpos + 1, merged, prob * p)

    walk(0, {}, 1.0)
    return dest


def _compositions(total, cells):
    if cells == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, cells - 1):
            yield (first,) + rest


def _multinomial_pmf(alloc, p):
    from math import factorial
    n = sum(alloc)
    out = factorial(n)
    for a_i, p_i in zip(alloc, p):
        out *= p_i ** a_i / factorial(a_i)
    return out


def _has_x_jumps(spec, t=0.0):
    if spec.marks.m == 0:
        return False
    k0 = spec.k0_values(t, spec.x_states)
    return bool(np.any(np.abs(k0) > 1e-14))


def _chain_matrix(spec, dt):
    """expm(Q dt), cached per spec and step size."""
    cache = spec.__dict__.setdefault("_chain_cache", {})
    if dt not in cache:
        cache[dt] = expm(spec.x_generator * dt)
    return cache[dt]


def exact_filter_step(spec, state, obs, dt=None):
    """One prediction-correction step of the exact finite-state filter.

    The measure tag of ``state`` selects the likelihood family (P or P*).
    Returns the filter at the next node: the conditional law of the
    post-transition latent state given all observations through this step.
    """
    if state.mode != "finite":
        raise FilterStateError("exact engine requires a finite-state law")
    if not spec.is_finite_state:
        raise FilterStateError("exact engine requires finite-state mode")
    state.validate()
    dt = obs.dt if dt is None else dt

    loglik = _log_likelihoods(spec, obs, spec.x_states, state.measure)
    post = _correct(state.weights, loglik)

    n = spec.n_states
    if _has_x_jumps(spec, obs.t):
        T = np.zeros((n, n))
        for i in range(n):
            if post[i] == 0.0:
                T[i, i] = 1.0
                continue
            dest = _jump_transition_row(spec, obs, i, state.measure)
            for idx, p in dest.items():
                T[i, idx] += p
        post = post @ T
        tot = post.sum()
        if tot <= 0:
            raise SupportError("jump transition annihilated the filter")
        post = post / tot
    post = post @ _chain_matrix(spec, dt)
    post = post / post.sum()
    return FilterState("finite", state.measure, spec.x_states, post,
                       state.t + dt)


def _correct(weights, loglik):
    finite = np.isfinite(loglik)
    if not np.any(finite & (weights > 0)):
        raise SupportError(
            "observation has zero likelihood under every state")
    shift = loglik[finite].max()
    lik = np.where(finite, np.exp(loglik - shift), 0.0)
    post = weights * lik
    tot = post.sum()
    if tot <= 0:
        raise SupportError(
            "observation has zero likelihood under every state")
    return post / tot


def filter_under_P_step(spec, state, obs, dt=None):
    """Exact step under the physical measure (state must be P-tagged)."""
    if state.measure != MEASURE_P:
        raise FilterStateError("filter_under_P_step needs a P-tagged state")
    return exact_filter_step(spec, state, obs, dt)


# ---------------------------------------------------------------------------
# particle engine
# ---------------------------------------------------------------------------

def particle_filter_step(spec, state, obs, rng, dt=None):
    """One step of the particle filter: reweight by the same per-point
    likelihoods as the exact engine, resample when ESS < N/2, then
    propagate every particle through the transition kernel."""
    if state.mode != "particle":
        raise FilterStateError("particle engine requires a particle cloud")
    if state.x_values.size == 0:
        raise EmptyCloudError("particle filter has no particles")
    state.validate()
    dt = obs.dt if dt is None else dt
    N = state.x_values.size

    if spec.is_finite_state:
        loglik = _log_likelihoods(spec, obs, state.x_values, state.measure)
    else:
        loglik = _log_likelihoods_continuous(spec, obs, state.x_values,
                                             state.measure)
    w = _correct(state.weights, loglik)

    ess = 1.0 / float(np.sum(w * w))
    xs = state.x_values
    if ess < ESS_FRACTION * N:
        xs = xs[_systematic_resample(w, N, rng)]
        w = np.full(N, 1.0 / N)

    xs = _propagate_particles(spec, obs, xs, state.measure, rng, dt)
    return FilterState("particle", state.measure, xs, w, state.t + dt)


def _systematic_resample(w, N, rng):
    positions = (rng.random() + np.arange(N)) / N
    return np.searchsorted(np.cumsum(w), positions)


def _log_likelihoods_continuous(spec, obs, xs, measure):
    """Likelihoods for a continuous-X cloud (no pooled-atom rows: jump
    weights are evaluated at each particle position)."""
    out = np.zeros(xs.size)
    t, s, dt = obs.t, obs.s, obs.dt
    if spec.has_brownian_s:
        sig1 = spec.sigma1_at(t, s)
        var = sig1 * sig1 * dt
        drift = _state_drifts(spec, t, s, xs, measure)
        resid = obs.r - drift * dt
        out -= resid * resid / (2.0 * var)
    if obs.pooled.n_atoms:
        # per-particle jump weights would be needed even on no-jump steps
        raise FilterStateError(
            "jump observations need finite-state mode; the continuous-X "
            "particle engine handles diffusion observations only")
    return out


def _propagate_particles(spec, obs, xs, measure, rng, dt):
    xs = xs.copy()
    t, s = obs.t, obs.s
    # jump counts move X only through K0 displacements
    if spec.is_finite_state and _has_x_jumps(spec, t):
        xs = _propagate_jumps(spec, obs, xs, measure, rng)
    if spec.is_finite_state:
        cum = np.cumsum(_chain_matrix(spec, dt), axis=1)
        rows = _state_rows(spec, xs)
        u = rng.random(xs.size)
        nxt = (u[:, None] > cum[rows]).sum(axis=1)
        return spec.x_states[nxt]
    c = spec.coefficients
    rho = c.rho
    mu0 = np.broadcast_to(np.asarray(
        c.mu0(t=t, x=xs, s=s), dtype=float), xs.shape)
    sg0 = np.broadcast_to(np.asarray(
        c.sigma0(t=t, x=xs, s=s), dtype=float), xs.shape)
    if spec.has_brownian_s and rho != 0.0:
        sig1 = spec.sigma1_at(t, s)
        drift = _state_drifts(spec, t, s, xs, measure)
        dw1 = (obs.r - drift * dt) / sig1
        dw0 = rho * dw1 + np.sqrt(1.0 - rho * rho) * \
            rng.standard_normal(xs.size) * np.sqrt(dt)
    else:
        dw0 = rng.standard_normal(xs.size) * np.sqrt(dt)
    return xs + mu0 * dt + sg0 * dw0


def _propagate_jumps(spec, obs, xs, measure, rng):
    """Sample each particle's mark attribution for the observed atoms and
    its unobserved X-only jump counts, then apply the displacements.

    Attribution ratios within an atom equal the untilted intensity ratios
    under both measures (the tilt factor is common to an atom's marks),
    and invisible marks carry zero tilt, so raw eta is exact here.
    """
    pooled = obs.pooled
    rows = _state_rows(spec, xs) if spec.is_finite_state else None
    t, s, dt = obs.t, obs.s, obs.dt
    order = _static_mark_order(spec, t, s) if spec.is_finite_state else \
        list(range(spec.marks.m))
    eta = spec.marks.weights
    out = xs.copy()
    for p in range(xs.size):
        i = rows[p] if rows is not None else None
        counts = {}
        ok = True
        for a in range(pooled.n_atoms):
            c_a = int(obs.atom_counts[a])
            if c_a == 0:
                continue
            cand = [j for j in range(spec.marks.m)
                    if i is not None and pooled.atom_of[i, j] == a]
            if not cand:
                ok = False
                break
            pj = eta[cand] / eta[cand].sum()
            alloc = rng.multinomial(c_a, pj)
            for j, cj in zip(cand, alloc):
                counts[j] = counts.get(j, 0) + int(cj)
        if not ok:
            continue  # weight was already zeroed by the likelihood
        for j in range(spec.marks.m):
            visible = i is not None and pooled.atom_of[i, j] >= 0
            if not visible:
                counts[j] = counts.get(j, 0) + int(rng.poisson(
                    eta[j] * dt))
        x = out[p]
        for j in order:
            cj = counts.get(j, 0)
            if cj:
                x = _apply_mark_map(spec, t, x, j, cj)
        out[p] = x
    return out


# ---------------------------------------------------------------------------
# expectations and projection weights
# ---------------------------------------------------------------------------

def filter_expectation(state, f, t, s):
    """E[f(t, X, s) | observations] under the filter law."""
    state.validate()
    vals = np.array([f(t, float(xv), s) for xv in state.x_values])
    return float(np.dot(state.weights, vals))


def nu_star_H(spec, t, s, state, pooled=None):
    """Projected tilted atom weights (see structure.nu_star_H_at)."""
    return nu_star_H_at(spec, t, s, state.weights, pooled=pooled)


@dataclass
class FilterWeights:
    """Kushner-Stratonovich correction weights for one test function."""

    h: float                       # continuous-correction weight
    w: np.ndarray                  # (A,) jump-correction weight per atom
    nu_star: np.ndarray            # (A,) projected tilted atom weights
    nu_P: np.ndarray               # (A,) projected untilted atom weights
    pooled: PooledAtoms
    fallback: np.ndarray           # (A,) bool: w computed from untilted nu


def jump_update_weights(spec, t, s, state, f, f_s=None, pooled=None,
                        counters=None):
    """The h and per-atom w weights for a test function f(t, x, s).

    ``state`` is the left-limit P*-filter. h = rho pi(sigma0 f_x) +
    s sigma1 pi(f_s) (the x-part drops in finite-state mode). For each
    pooled atom, w is the filter-average of f at the post-jump point
    weighted by the tilted atom intensities, minus pi(f); atoms whose
    projected tilted weight vanishes fall back to the untilted weights
    (counted in ``counters['w_fallback']``).
    """
    state.validate()
    if pooled is None:
        pooled = pooled_atoms(spec, t, s)
    probs = state.weights
    n = spec.n_states
    A = pooled.n_atoms

    pi_f = float(np.dot(probs, [f(t, float(xv), s)
                                for xv in spec.x_states]))

    h = 0.0
    if spec.has_brownian_s and f_s is not None:
        sig1 = spec.sigma1_at(t, s)
        pi_fs = float(np.dot(probs, [f_s(t, float(xv), s)
                                     for xv in spec.x_states]))
        h = s * sig1 * pi_fs

    nu_star = probs @ pooled.star_weights
    nu_P = probs @ pooled.state_weights
    w = np.zeros(A)
    fallback = np.zeros(A, dtype=bool)
    if A:
        num_star = np.zeros(A)
        num_P = np.zeros(A)
        eta = spec.marks.weights
        for i in range(n):
            if probs[i] == 0.0:
                continue
            x_i = float(spec.x_states[i])
            k1_i = spec.k1_values(t, x_i, s)
            z_i = s * k1_i
            av, _ = _alpha_block(spec, t, np.array([x_i]), np.array([s]))
            alpha_i = float(av[0])
            for j in range(spec.marks.m):
                a = pooled.atom_of[i, j]
                if a < 0:
                    continue
                dest = spec.snap_state(
                    x_i + float(spec.k0_values(t, x_i)[j]))
                f_post = f(t, dest, s * (1.0 + float(k1_i[j])))
                w_star = max(1.0 - alpha_i * float(z_i[j]), 0.0) * eta[j]
                num_star[a] += probs[i] * w_star * f_post
                num_P[a] += probs[i] * eta[j] * f_post
        for a in range(A):
            if nu_star[a] > 1e-12:
                w[a] = num_star[a] / nu_star[a] - pi_f
            elif nu_P[a] > 1e-12:
                w[a] = num_P[a] / nu_P[a] - pi_f
                fallback[a] = True
                if counters is not None:
                    counters["w_fallback"] = counters.get("w_fallback",
                                                          0) + 1
            else:
                w[a] = 0.0
    return FilterWeights(h, w, nu_star, nu_P, pooled, fallback)


# ---------------------------------------------------------------------------
# trajectory drivers
# ---------------------------------------------------------------------------

@dataclass
class FilterTrajectory:
    """Filter laws along one path or an ensemble, both measures.

    probs_P / probs_star hold left limits: entry k is the law of X at
    node k given observations of steps 0..k-1 (so entry 0 is the prior
    and entry k is what a strategy may use over step k).
    """

    x_values: np.ndarray
    probs_P: np.ndarray            # (..., N+1, n_states)
    probs_star: np.ndarray


def run_filters_along_path(spec, path, measures=(MEASURE_P,
                                                 MEASURE_PSTAR)):
    """Exact filters under both measures along one simulated path."""
    obs_list = make_observations(spec, path)
    N = path.grid.n_steps
    n = spec.n_states
    out = {}
    for measure in measures:
        state = finite_prior(spec, measure)
        probs = np.empty((N + 1, n))
        probs[0] = state.weights
        for k, obs in enumerate(obs_list):
            state = exact_filter_step(spec, state, obs)
            probs[k + 1] = state.weights
        out[measure] = probs
    return FilterTrajectory(
        spec.x_states,
        out.get(MEASURE_P),
        out.get(MEASURE_PSTAR))


def _fast_path_eligible(spec, grid):
    """The vectorized ensemble driver applies when the jump geometry is
    constant over the lattice (state-dependent sizes allowed, no (t, s)
    dependence). X displacements at jumps are fine: their transition
    matrices depend only on the observed atom-count pattern then, and a
    handful of patterns covers an ensemble."""
    if not spec.is_finite_state:
        return False
    if spec.marks.m == 0:
        return True
    from .models import _scan_lattice
    if spec.coefficients.K0.depends_on("t"):
        return False
    ts, _, ss = _scan_lattice(spec, grid.horizon)
    ref = spec.k1_values(0.0, spec.x_states, spec.s0)
    for t in ts:
        for s in ss:
            k1 = spec.k1_values(float(t), spec.x_states, float(s))
            if not np.allclose(k1, ref, rtol=0.0, atol=1e-12):
                return False
    c = spec.coefficients
    if c.sigma1 is not None and (c.sigma1.depends_on("s")
                                 or c.sigma1.depends_on("t")):
        return False
    if spec.has_brownian_s and (c.mu1.depends_on("s")
                                or c.mu1.depends_on("t")):
        return False
    return True


def _apply_jump_transitions(spec, measure, dt, pooled, counts_k, post,
                            cache, step):
    """Post-jump state mixing for a block of paths at one step.

    With a static jump geometry the transition matrix built by
    _jump_transition_row depends only on the observed atom-count
    pattern, so paths sharing a pattern share the matrix; each distinct
    pattern is enumerated once per measure and cached. States a pattern
    rules out get a zero row, which is harmless because the likelihood
    correction has already removed their mass.
    """
    n = spec.n_states
    uniq, inv = np.unique(counts_k, axis=0, return_inverse=True)
    out = np.empty_like(post)
    for u_idx in range(uniq.shape[0]):
        key = tuple(int(c) for c in uniq[u_idx])
        T = cache.get(key)
        if T is None:
            obs = StepObservation(0.0, spec.s0, dt,
                                  np.asarray(key, dtype=np.int64),
                                  pooled, 0.0, spec.s0)
            T = np.zeros((n, n))
            for i in range(n):
                for idx, p in _jump_transition_row(spec, obs, i,
                                                   measure).items():
                    T[i, idx] += p
            cache[key] = T
        sel = inv == u_idx
        out[sel] = post[sel] @ T
    tot = out.sum(axis=1, keepdims=True)
    if not np.all(tot > 0):
        bad = int(np.argmax(~(tot[:, 0] > 0)))
        raise SupportError(
            f"jump transition annihilated the filter on path {bad}, "
            f"step {step}")
    return out / tot


def run_filters_ensemble(spec, ens, measures=(MEASURE_P, MEASURE_PSTAR)):
    """Exact filters for a whole ensemble, vectorized over paths.

    Requires fast-path eligibility (checked; falls back to the per-path
    engine otherwise). Results match exact_filter_step to round-off.
    """
    grid = ens.grid
    N = grid.n_steps
    n_paths = ens.s.shape[0]
    n = spec.n_states

    if not _fast_path_eligible(spec, grid):
        pP = np.empty((n_paths, N + 1, n))
        pS = np.empty((n_paths, N + 1, n))
        for i in range(n_paths):
            tr = run_filters_along_path(spec, ens.path(i), measures)
            if tr.probs_P is not None:
                pP[i] = tr.probs_P
            if tr.probs_star is not None:
                pS[i] = tr.probs_star
        return FilterTrajectory(
            spec.x_states,
            pP if MEASURE_P in measures else None,
            pS if MEASURE_PSTAR in measures else None)

    pooled = pooled_atoms(spec, 0.0, spec.s0)
    A = pooled.n_atoms
    k_rel = pooled.k_rel
    atom_of = pooled.atom_of
    chain = _chain_matrix(spec, grid.dt)
    idx = _state_rows(spec, ens.x.reshape(-1)).reshape(ens.x.shape)

    # pooled atom counts per (path, step): map true-state mark counts
    atom_counts = np.zeros((n_paths, N, A), dtype=np.int64)
    if spec.marks.m:
        for i in range(n):
            sel = idx[:, :-1] == i
            if not np.any(sel):
                continue
            for j in range(spec.marks.m):
                a = atom_of[i, j]
                if a >= 0:
                    atom_counts[:, :, a] += np.where(
                        sel, ens.counts[:, :, j], 0)

    # residual returns
    if A:
        factors = np.prod((1.0 + k_rel[None, None, :]) ** atom_counts,
                          axis=2)
    else:
        factors = np.ones((n_paths, N))
    rr = ens.s[:, 1:] / ens.s[:, :-1] / factors - 1.0

    prior = finite_prior(spec, MEASURE_P).weights
    x_jumps = _has_x_jumps(spec)
    out = {}
    for measure in measures:
        nu = pooled.state_weights if measure == MEASURE_P else \
            np.maximum(pooled.star_weights, 0.0)
        lam = nu * grid.dt                       # (n, A)
        with np.errstate(divide="ignore"):
            log_lam = np.where(lam > 0, np.log(lam), -np.inf)
        trans_cache = {}
        probs = np.empty((n_paths, N + 1, n))
        probs[:, 0, :] = prior[None, :]
        cur = np.tile(prior, (n_paths, 1))
        for k in range(N):
            t = getattr(ens, "t_offset", 0.0) + grid.times[k]
            ll = np.zeros((n_paths, n))
            if spec.has_brownian_s:
                # sigma1 and the per-state drifts are (t, s)-free by the
                # eligibility check, so evaluating at s0 is exact
                sig1 = spec.sigma1_at(t, spec.s0)
                var = sig1 * sig1 * grid.dt
                drift = _state_drifts(spec, t, spec.s0, spec.x_states,
                                      measure)
                resid = rr[:, k][:, None] - drift[None, :] * grid.dt
                ll -= resid * resid / (2.0 * var)
            if A:
                c = atom_counts[:, k, :]          # (n_paths, A)
                with np.errstate(invalid="ignore"):
                    term = np.where(
                        c[:, None, :] > 0,
                        c[:, None, :] * log_lam[None, :, :], 0.0)
                ll += term.sum(axis=2) - lam.sum(axis=1)[None, :]
            shift = ll.max(axis=1, keepdims=True)
            with np.errstate(invalid="ignore"):
                lik = np.where(np.isfinite(ll), np.exp(ll - shift), 0.0)
            post = cur * lik
            tot = post.sum(axis=1, keepdims=True)
            if not np.all(tot > 0):
                bad = int(np.argmax(~(tot[:, 0] > 0)))
                raise SupportError(
                    f"zero-likelihood observation on path {bad}, "
                    f"step {k}")
            post = post / tot
            if x_jumps:
                post = _apply_jump_transitions(
                    spec, measure, grid.dt, pooled, atom_counts[:, k, :],
                    post, trans_cache, k)
            cur = post @ chain
            cur = cur / cur.sum(axis=1, keepdims=True)
            probs[:, k + 1, :] = cur
        out[measure] = probs

    return FilterTrajectory(
        spec.x_states,
        out.get(MEASURE_P),
        out.get(MEASURE_PSTAR))


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------

def tv_distance(p, q):
    """Total-variation distance between two discrete laws."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def particle_state_law(spec, state):
    """Project a particle cloud onto the finite state grid."""
    rows = _state_rows(spec, state.x_values)
    law = np.zeros(spec.n_states)
    np.add.at(law, rows, state.weights)
    return law


def write_filters_csv(fname, rows):
    """Dump filter trajectories: one row per (path, step, support point).

    ``rows`` iterates (path_id, step, t, measure, index, weight, x).
    """
    with open(fname, "w") as fh:
        fh.write("path_id,step,t,measure,state_index_or_particle_id,"
                 "weight,x\n")
        for r in rows:
            fh.write("%d,%d,%.12g,%s,%d,%.17g,%.17g\n" % tuple(r))
