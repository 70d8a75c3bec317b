"""Structure-condition ingredients and the martingale measure density.

For each model the traded asset decomposes as S = S_0 + M + A with M a
square-integrable martingale and dA = alpha_F d<M>; this module computes

  * ``a_at``            the density a = d<M>/dt = s^2 sigma1^2 + sum z^2 eta
  * ``alpha_F_at``      the premium alpha_F = (asset drift rate) / a
  * ``eta_star_weights``the tilted jump weights (1 - alpha_F z) eta under
                        the minimal martingale measure
  * ``pooled_atoms``    the observable jump-size grid: atoms z = s K1 pooled
                        across latent states onto a shared grid
  * ``alpha_H_at`` /    the restricted-information analogues, obtained by
    ``nu_H_at``         averaging the per-state quantities with the filter
  * ``mmm_density``     the density process L of P* w.r.t. P along a path

All filter inputs use left limits (the filter state before the current
step's observation); all jump-size evaluations freeze coefficients at the
step's left endpoint, which makes the discrete density exactly mean one.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegeneracyError, FilterStateError, GridCollisionError, MeasureSignError,
    SignedDensityError,
)

# pooling tolerance for the shared jump-size grid, relative to s0
POOL_TOL = 1e-9

# filters fed to projections must be normalized to this absolute tolerance
NORM_TOL = 1e-8


# ---------------------------------------------------------------------------
# per-state quantities under full information
# ---------------------------------------------------------------------------

def nu_F_atoms(spec, t, x, s):
    """Observable jump-size atoms in state x: values z_j = s*K1_j and
    weights eta_j, over the full mark grid (zero-size atoms included)."""
    z = s * spec.k1_values(t, x, s)
    return z, spec.marks.weights.copy()


def drift_rate_at(spec, t, x, s):
    """Instantaneous P-drift rate of S: s*mu1 (Brownian models) plus the
    raw jump contribution sum_j s*K1_j eta_j."""
    out = 0.0
    if spec.has_brownian_s:
        out += s * spec.mu1_at(t, x, s)
    if spec.marks.m:
        z, eta = nu_F_atoms(spec, t, x, s)
        out += float(np.dot(z, eta))
    return out


def a_at(spec, t, x, s):
    """Quadratic-variation density a = d<M>/dt at (t, x, s)."""
    sig1 = spec.sigma1_at(t, s)
    out = (s * sig1) ** 2
    if spec.marks.m:
        z, eta = nu_F_atoms(spec, t, x, s)
        out += float(np.dot(z * z, eta))
    return out


def alpha_F_at(spec, t, x, s):
    """Full-information premium alpha_F = drift rate / a.

    Reduces to mu1/(s sigma1^2) for the diffusion model and to
    (sum K1 eta)/(s sum K1^2 eta) for the pure-jump model. Raises
    DegeneracyError when a = 0 (no Brownian driver and no active jumps).
    """
    a = a_at(spec, t, x, s)
    if a <= 0.0:
        raise DegeneracyError(
            f"d<M>/dt vanishes at (t={t}, x={x}, s={s}); "
            "premium is undefined")
    return drift_rate_at(spec, t, x, s) / a


def eta_star_weights(spec, t, x, s, strict=False):
    """Tilted mark weights eta*_j = (1 - alpha_F * s * K1_j) * eta_j.

    These are the jump weights under the minimal martingale measure; by
    construction the tilted drift rate vanishes. The result can contain
    negative entries for aggressive specs; with strict=True that raises
    MeasureSignError, otherwise callers decide.
    """
    alpha = alpha_F_at(spec, t, x, s)
    z, eta = nu_F_atoms(spec, t, x, s)
    out = (1.0 - alpha * z) * eta
    if strict and np.any(out < 0):
        j = int(np.argmin(out))
        raise MeasureSignError(
            f"eta* negative at mark {j} (t={t}, x={x}, s={s})")
    return out


# ---------------------------------------------------------------------------
# pooled observable atoms (shared z-grid across latent states)
# ---------------------------------------------------------------------------

@dataclass
class PooledAtoms:
    """Observable jump-size atoms pooled across latent states.

    z             (A,) pooled jump sizes (absolute S displacement)
    k_rel         (A,) relative sizes z/s
    state_weights (n_states, A) P-intensity of each atom per state
    star_weights  (n_states, A) tilted (P*) intensity per state
    atom_of       (n_states, m) atom index of each (state, mark), or -1
                  when the mark does not move S in that state
    """

    z: np.ndarray
    k_rel: np.ndarray
    state_weights: np.ndarray
    star_weights: np.ndarray
    atom_of: np.ndarray

    @property
    def n_atoms(self):
        return self.z.size


def _cluster_sorted(values, tol):
    """Group sorted values into clusters with consecutive gaps <= tol.

    Raises GridCollisionError when a cluster's total spread exceeds tol
    (chained near-collisions make the pooling ambiguous).
    """
    clusters = []
    start = 0
    for k in range(1, len(values) + 1):
        if k == len(values) or values[k] - values[k - 1] > tol:
            if values[k - 1] - values[start] > tol:
                raise GridCollisionError(
                    "ambiguous jump-size pooling: atoms chain across the "
                    f"collision tolerance near z={values[start]:.9g}")
            clusters.append((start, k))
            start = k
    return clusters


def pooled_atoms(spec, t, s, x_values=None):
    """Build the shared observable atom grid at (t, s).

    x_values defaults to the finite state list. Atoms with |z| below the
    pooling tolerance are dropped (marks that do not move S are invisible
    to the observer). Atom values within tolerance of each other across
    states are merged onto one grid point.
    """
    if x_values is None:
        if not spec.is_finite_state:
            raise FilterStateError(
                "pooled_atoms needs x_values for a continuous-state model")
        x_values = spec.x_states
    x_values = np.asarray(x_values, dtype=float)
    n = x_values.size
    m = spec.marks.m
    tol = POOL_TOL * spec.s0
    eta = spec.marks.weights

    entries = []  # (z, state index, mark index)
    zmat = np.zeros((n, m))
    for i, xv in enumerate(x_values):
        z_i, _ = nu_F_atoms(spec, t, float(xv), s)
        zmat[i] = z_i
        for j in range(m):
            if abs(z_i[j]) > tol:
                entries.append((z_i[j], i, j))

    atom_of = np.full((n, m), -1, dtype=int)
    if not entries:
        empty = np.zeros((n, 0))
        return PooledAtoms(np.zeros(0), np.zeros(0), empty, empty.copy(),
                           atom_of)

    entries.sort(key=lambda e: e[0])
    values = [e[0] for e in entries]
    clusters = _cluster_sorted(values, tol)

    A = len(clusters)
    z_pool = np.empty(A)
    state_weights = np.zeros((n, A))
    star_weights = np.zeros((n, A))
    alpha = np.array([alpha_F_at(spec, t, float(xv), s) for xv in x_values])
    for a_idx, (lo, hi) in enumerate(clusters):
        members = entries[lo:hi]
        z_pool[a_idx] = np.mean([e[0] for e in members])
        for zval, i, j in members:
            atom_of[i, j] = a_idx
            state_weights[i, a_idx] += eta[j]
            star_weights[i, a_idx] += (1.0 - alpha[i] * zval) * eta[j]

    return PooledAtoms(z_pool, z_pool / s, state_weights, star_weights,
                       atom_of)


# ---------------------------------------------------------------------------
# restricted-information projections
# ---------------------------------------------------------------------------

def _check_filter(weights):
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise FilterStateError("filter weights must be a nonempty vector")
    if np.any(w < -1e-12):
        raise FilterStateError("filter weights must be nonnegative")
    if abs(w.sum() - 1.0) > NORM_TOL:
        raise FilterStateError(
            f"filter weights not normalized (sum={w.sum():.12g})")
    return w


def alpha_H_weighted(spec, t, s, x_values, weights, counters=None):
    """Projected premium alpha_H = filter(drift rate) / filter(a).

    ``weights`` is the P-filter over ``x_values`` at the left limit. The
    indicator convention applies: when filter(a) = 0 the premium is set to
    zero and the event is counted in ``counters['alpha_H_zero_mass']``.
    """
    w = _check_filter(weights)
    x_values = np.asarray(x_values, dtype=float)
    num = sum(wi * drift_rate_at(spec, t, float(xv), s)
              for wi, xv in zip(w, x_values) if wi > 0.0)
    den = sum(wi * a_at(spec, t, float(xv), s)
              for wi, xv in zip(w, x_values) if wi > 0.0)
    if den == 0.0:
        if counters is not None:
            counters["alpha_H_zero_mass"] = (
                counters.get("alpha_H_zero_mass", 0) + 1)
        return 0.0
    return num / den


def alpha_H_at(spec, t, s, probs, counters=None):
    """Finite-state wrapper for alpha_H_weighted over spec.x_states."""
    return alpha_H_weighted(spec, t, s, spec.x_states, probs,
                            counters=counters)


def p_a_weighted(spec, t, s, x_values, weights):
    """Projected quadratic-variation density filter(a): the density of
    <N> for the observation-filtration martingale N."""
    w = _check_filter(weights)
    return sum(wi * a_at(spec, t, float(xv), s)
               for wi, xv in zip(w, np.asarray(x_values, dtype=float))
               if wi > 0.0)


def nu_H_at(spec, t, s, probs, pooled=None):
    """Filter-averaged observable atom weights under P.

    Returns (pooled, weights): the shared atom grid and the vector
    nu_H_a = sum_i probs_i * state_weights[i, a]. ``pooled`` can be
    passed in to reuse an existing grid at this (t, s).
    """
    w = _check_filter(probs)
    if pooled is None:
        pooled = pooled_atoms(spec, t, s)
    return pooled, w @ pooled.state_weights


def nu_star_H_at(spec, t, s, probs_star, pooled=None):
    """Filter-averaged atom weights under P*, using the P*-filter and the
    tilted per-state rows. By construction sum_a z_a nu*_{i,a} plus the
    Brownian drift vanishes per state, so the projected compensator also
    has zero drift contribution."""
    w = _check_filter(probs_star)
    if pooled is None:
        pooled = pooled_atoms(spec, t, s)
    return pooled, w @ pooled.star_weights


# ---------------------------------------------------------------------------
# structure coefficients along a path, and the MMM density
# ---------------------------------------------------------------------------

@dataclass
class StructureCoefficients:
    """Structure-condition quantities evaluated along one path.

    All node-indexed arrays have length n_steps + 1 and hold left-limit
    evaluations (node k carries the value used over step k). alpha_H,
    nu_H, p_a are filled only when a filter trajectory is supplied.
    """

    times: np.ndarray
    alpha_F: np.ndarray
    a: np.ndarray
    drift: np.ndarray
    z_marks: np.ndarray            # (N+1, m) jump sizes at each node
    eta: np.ndarray                # (m,) constant mark weights
    gamma_inc: np.ndarray          # (N,) increments of the FV part
    alpha_H: Optional[np.ndarray] = None
    p_a: Optional[np.ndarray] = None
    nu_H: Optional[list] = None
    counters: dict = field(default_factory=dict)


@dataclass
class MeasurePath:
    """Density process of P* w.r.t. P along one path."""

    L: np.ndarray                  # (N+1,)
    log_L: np.ndarray              # (N+1,) accumulator, NaN once excluded
    excluded: bool = False
    n_bad_factors: int = 0


def structure_along_path(spec, path):
    """Evaluate alpha_F, a, drift, and the mark grid at every node of a
    simulated path (left-limit convention: node k rules step k)."""
    times = path.grid.times
    N = path.grid.n_steps
    m = spec.marks.m
    alpha = np.empty(N + 1)
    a = np.empty(N + 1)
    drift = np.empty(N + 1)
    z_marks = np.zeros((N + 1, m))
    for k in range(N + 1):
        t, x, s = times[k], path.x_path[k], path.s_path[k]
        a[k] = a_at(spec, t, x, s)
        drift[k] = drift_rate_at(spec, t, x, s)
        alpha[k] = drift[k] / a[k] if a[k] > 0 else 0.0
        if m:
            z_marks[k] = s * spec.k1_values(t, x, s)
    gamma_inc = alpha[:-1] * a[:-1] * path.grid.dt
    return StructureCoefficients(times, alpha, a, drift, z_marks,
                                 spec.marks.weights.copy(), gamma_inc)


def mmm_density(path, coeffs, spec=None, strict=False):
    """Density L of the minimal martingale measure along one P-path.

    Per step k the discrete Doleans-Dade factor is

        exp(-alpha_k s_k sigma1_k dW1_k - (alpha_k s_k sigma1_k)^2 dt / 2
            + alpha_k (sum_j z_kj eta_j) dt)
        * prod_j (1 - alpha_k z_kj)^{count_kj}

    with everything frozen at the step's left endpoint; conditional on
    node k this factor has mean exactly one, so E[L_T] = 1 holds in the
    discrete model, not only asymptotically. A nonpositive jump factor
    marks the path excluded (SignedDensityError if strict).
    """
    N = path.grid.n_steps
    dt = path.grid.dt
    L = np.ones(N + 1)
    log_L = np.zeros(N + 1)
    counts = _counts_matrix(path, coeffs.eta.size)
    excluded = False
    n_bad = 0
    acc = 0.0
    for k in range(N):
        alpha_k = coeffs.alpha_F[k]
        s_k = path.s_path[k]
        sig1 = spec.sigma1_at(path.grid.times[k], s_k) if spec is not None \
            else _sigma_from_coeffs(coeffs, k, s_k)
        vol = alpha_k * s_k * sig1
        expo = -vol * path.dW1[k] - 0.5 * vol * vol * dt
        if coeffs.eta.size:
            expo += alpha_k * float(
                np.dot(coeffs.z_marks[k], coeffs.eta)) * dt
        factor = np.exp(expo)
        for j in np.nonzero(counts[k])[0]:
            base = 1.0 - alpha_k * coeffs.z_marks[k, j]
            if base <= 0.0:
                n_bad += 1
                excluded = True
                if strict:
                    raise SignedDensityError(
                        f"MMM jump factor nonpositive at step {k}, mark {j}")
                base = np.nan
            factor *= base ** counts[k, j]
        acc += np.log(factor) if factor > 0 else np.nan
        log_L[k + 1] = acc
        L[k + 1] = L[k] * factor
    if excluded:
        L[np.isnan(L)] = 0.0
    return MeasurePath(L, log_L, excluded, n_bad)


@dataclass
class MeasureEnsemble:
    """MMM density for a whole ensemble: path axis first."""

    L: np.ndarray                  # (n, N+1)
    excluded: np.ndarray           # (n,) bool
    n_bad_factors: int = 0


def mmm_density_ensemble(spec, ens):
    """Vectorized MMM density over an EnsembleResult (same per-step factor
    as mmm_density; agrees path by path to floating round-off)."""
    n, N = ens.dW1.shape
    dt = ens.grid.dt
    m = spec.marks.m
    eta = spec.marks.weights
    L = np.ones((n, N + 1))
    bad = np.zeros(n, dtype=bool)
    n_bad = 0
    for k in range(N):
        t = getattr(ens, "t_offset", 0.0) + ens.grid.times[k]
        x = ens.x[:, k]
        s = ens.s[:, k]
        alpha, a = _alpha_block(spec, t, x, s)
        sig1 = np.broadcast_to(np.asarray(
            spec.sigma1_at(t, s), dtype=float), s.shape)
        vol = alpha * s * sig1
        expo = -vol * ens.dW1[:, k] - 0.5 * vol * vol * dt
        factor = np.exp(expo)
        if m:
            k1 = spec.k1_values(t, x, s)       # (m, n)
            z = s[None, :] * k1
            expo_j = alpha * (eta @ z) * dt
            factor = factor * np.exp(expo_j)
            base = 1.0 - alpha[None, :] * z    # (m, n)
            cts = ens.counts[:, k, :].T        # (m, n)
            hit = (cts > 0) & (base <= 0.0)
            if np.any(hit):
                n_bad += int(hit.sum())
                bad |= hit.any(axis=0)
                base = np.where(hit, np.nan, base)
            factor = factor * np.prod(
                np.where(cts > 0, base ** cts, 1.0), axis=0)
        L[:, k + 1] = L[:, k] * factor
    if np.any(bad):
        L[np.isnan(L)] = 0.0
        L[bad, -1] = 0.0
    return MeasureEnsemble(L, bad, n_bad)


def _alpha_block(spec, t, x, s):
    """Premium and quadratic-variation density over a block (alpha set to
    0 where a = 0, matching mmm_density's convention)."""
    sig1 = spec.sigma1_at(t, s) if spec.has_brownian_s else 0.0
    a = np.broadcast_to(np.asarray((s * sig1) ** 2, dtype=float),
                        s.shape).copy()
    drift = np.zeros_like(a)
    if spec.has_brownian_s:
        drift += np.broadcast_to(np.asarray(
            s * spec.mu1_at(t, x, s), dtype=float), s.shape)
    if spec.marks.m:
        k1 = spec.k1_values(t, x, s)
        z = s[None, :] * k1
        eta = spec.marks.weights
        drift += eta @ z
        a += eta @ (z * z)
    alpha = np.zeros_like(a)
    np.divide(drift, a, out=alpha, where=a > 0)
    return alpha, a


def _counts_matrix(path, m):
    counts = getattr(path, "counts", None)
    if counts is not None:
        return counts
    out = np.zeros((path.grid.n_steps, m), dtype=int)
    for step, mark in path.jump_events:
        out[step, mark] += 1
    return out


def _sigma_from_coeffs(coeffs, k, s_k):
    """Back out s*sigma1 from a = s^2 sigma1^2 + sum z^2 eta when no spec
    is at hand."""
    jump_part = float(np.dot(coeffs.z_marks[k] ** 2, coeffs.eta)) \
        if coeffs.eta.size else 0.0
    var = max(coeffs.a[k] - jump_part, 0.0)
    return np.sqrt(var) / s_k if s_k > 0 else 0.0


def write_structure_csv(fname, rows):
    """Dump structure coefficients: one row per (path, step).

    ``rows`` iterates tuples (path_id, step, alpha_F, alpha_H, a, p_a, L).
    """
    with open(fname, "w") as fh:
        fh.write("path_id,step,alpha_F,alpha_H,a,p_a,L\n")
        for row in rows:
            fh.write("%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n" % tuple(row))
