"""Hedging strategies under full and restricted information.

The full-information hedge is the bracket ratio

    beta_F = [s^2 sig1^2 g_s + rho sig0 s sig1 g_x + sum_z z dg eta]
             / [s^2 sig1^2 + sum_z z^2 eta]

evaluated at the true latent state. Under the observation filtration the
strategy splits into a martingale-measure part beta_tilde (projected
tilted compensator in the denominator) plus a correction phi carrying
the gap between the P- and P*-projected jump compensators:

    beta_tilde = [s sig1 h + sum z w nu*] / [s^2 sig1^2 + sum z^2 nu*]
    phi        = sum z (w - beta_tilde z)(nu - nu*)
                 / [s^2 sig1^2 + sum z^2 nu]
    beta       = beta_tilde + phi
               = [s sig1 h + sum z w nu] / [s^2 sig1^2 + sum z^2 nu]

where h and the per-atom w are the filter correction weights of the
value function and nu / nu* are the filter-averaged jump compensators
under P / P*. The closed recombination on the right is an algebraic
identity; it makes beta the exact minimizer of the local quadratic
(h - theta*s*sig1)^2 + sum (w - theta*z)^2 nu, which is what the
brute-force oracle in this module enumerates.

Cost accounting is discrete and predictable: the hedge ratio is frozen
at the left node over each step, C_0 = V_0, and the residual A is
measured off the realized cost, never constructed analytically. The
diagnostics battery turns the theory's orthogonality statements into
sample statistics with standard errors.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BoundViolationError, DegeneracyError, FilterStateError,
    SampleSizeError, SurfaceError,
)
from .filtering import FilterState, jump_update_weights
from .models import MEASURE_P, MEASURE_PSTAR
from .pricing import value_process
from .structure import (
    mmm_density_ensemble, nu_H_at, pooled_atoms, _alpha_block,
)

# a bracket denominator below this (relative to s0^2) counts as dead
DENOM_TOL = 1e-14
# sigma1 floor for the continuous-model kernel, relative
SIGMA_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class StrategyPath:
    """Hedge components along one path, one entry per grid node.

    The ratios at node k are built from left-limit information (filter
    given observations through node k) and act over step k; the cost
    recursion C_{k+1} = C_k + (V_{k+1} - V_k) - beta_k (S_{k+1} - S_k)
    freezes them there. riskless holds V - beta*S (the bank account
    position completing the hedge portfolio).
    """

    times: np.ndarray
    s_path: np.ndarray
    beta_F: np.ndarray
    beta_tilde_H: np.ndarray
    phi_H: np.ndarray
    beta_H: np.ndarray
    V: np.ndarray
    C: np.ndarray
    A_increment: np.ndarray
    riskless: np.ndarray
    counters: dict = field(default_factory=dict)
    path_index: int = 0


@dataclass
class StrategyEnsemble:
    """Stacked strategy paths (path axis first) plus the per-node
    quantities the diagnostics need: the projected price drift (for the
    observable martingale increments) and the measure density L."""

    times: np.ndarray              # (N+1,)
    s: np.ndarray                  # (n, N+1)
    beta_F: np.ndarray
    beta_tilde_H: np.ndarray
    phi_H: np.ndarray
    beta_H: np.ndarray
    V: np.ndarray
    C: np.ndarray
    A_increment: np.ndarray
    riskless: np.ndarray
    drift_H: np.ndarray            # (n, N+1) filter-projected drift rate
    L: np.ndarray                  # (n, N+1) MMM density along each path
    excluded: np.ndarray           # (n,) MMM density hit a dead factor
    counters: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.s.shape[0]

    def path(self, i):
        return StrategyPath(
            self.times, self.s[i], self.beta_F[i], self.beta_tilde_H[i],
            self.phi_H[i], self.beta_H[i], self.V[i], self.C[i],
            self.A_increment[i], self.riskless[i],
            dict(self.counters), path_index=i)


# ---------------------------------------------------------------------------
# full-information strategy
# ---------------------------------------------------------------------------

def _beta_F_node(spec, surface, t, x, s):
    """Bracket-ratio hedge at one node with the latent state known."""
    x = float(x)
    s = float(s)
    num = 0.0
    den = 0.0
    if spec.has_brownian_s:
        sv = s * float(spec.sigma1_at(t, s))
        num += sv * sv * surface.slope(t, x, s)
        den += sv * sv
        rho = spec.coefficients.rho
        if not spec.is_finite_state and rho:
            sg0 = float(spec.coefficients.sigma0(t=t, x=x, s=s))
            num += rho * sg0 * sv * surface.slope_x(t, x, s)
    if spec.marks.m:
        g_here = surface.value(t, x, s)
        k1 = np.atleast_1d(np.asarray(spec.k1_values(t, x, s),
                                      dtype=float))
        k0 = spec.k0_values(t, x)
        eta = spec.marks.weights
        for j in range(spec.marks.m):
            z = s * float(k1[j])
            if z == 0.0:
                continue
            dest = spec.snap_state(x + float(k0[j])) \
                if spec.is_finite_state else x + float(k0[j])
            dg = surface.value(t, dest, s * (1.0 + float(k1[j]))) - g_here
            num += z * dg * eta[j]
            den += z * z * eta[j]
    if den <= DENOM_TOL * spec.s0 ** 2:
        raise DegeneracyError(
            f"dead bracket at t={t:.6g}: no diffusion and no jump "
            "activity")
    return num / den


def beta_F_path(spec, surface, path):
    """Full-information hedge ratio along one path (left limits).

    Diffusion models reduce to [rho sig0 g_x + s sig1 g_s]/(s sig1);
    pure-jump models to the jump-bracket ratio; jump-diffusion keeps
    both terms.
    """
    if not spec.is_finite_state and spec.coefficients.rho \
            and surface.dg_dx is None:
        raise SurfaceError("beta_F needs x-derivative sheets when the "
                           "Brownian drivers are correlated")
    n = path.grid.n_steps
    out = np.empty(n + 1)
    for k in range(n + 1):
        t = path.grid.times[k]
        out[k] = _beta_F_node(spec, surface, t, path.x_path[k],
                              path.s_path[k])
    return out


# ---------------------------------------------------------------------------
# restricted-information kernels
# ---------------------------------------------------------------------------

def beta_H_continuous(spec, surface, state, t, s):
    """Observation-filtration hedge for models without jumps.

    Returns (beta_tilde, phi, beta) with phi = 0: there is no
    compensator gap to correct when S is continuous. beta is the
    filter average of the full-information numerator over s*sig1.
    """
    if spec.marks.m:
        raise ValueError("continuous kernel called on a jump model")
    state.validate()
    sv = float(s) * float(spec.sigma1_at(t, s))
    if sv <= SIGMA_FLOOR * spec.s0:
        raise BoundViolationError(
            f"s*sigma1 = {sv:.3e} at t={t:.6g}: below the hedging floor")
    num = 0.0
    for xv, wt in zip(state.x_values, state.weights):
        if wt == 0.0:
            continue
        part = sv * surface.slope(t, float(xv), s)
        rho = spec.coefficients.rho
        if not spec.is_finite_state and rho:
            sg0 = float(spec.coefficients.sigma0(t=t, x=float(xv), s=s))
            part += rho * sg0 * surface.slope_x(t, float(xv), s)
        num += wt * part
    beta = num / sv
    return beta, 0.0, beta


def beta_H_jump(spec, surface, state_star, state_P, t, s, pooled=None,
                counters=None):
    """Observation-filtration hedge for jump and jump-diffusion models.

    state_star / state_P are the left-limit filters under P* and P. The
    value-function correction weights (h, per-atom w) are projected with
    the P*-filter; the compensators nu* and nu with the matching filter
    each. Returns (beta_tilde, phi, beta).
    """
    if not spec.is_finite_state:
        raise ValueError("jump kernel needs finite-state mode")
    s = float(s)

    def f(tt, xv, sv):
        return surface.value(tt, xv, sv)

    f_s = (lambda tt, xv, sv: surface.slope(tt, xv, sv)) \
        if spec.has_brownian_s else None
    fw = jump_update_weights(spec, t, s, state_star, f, f_s=f_s,
                             pooled=pooled, counters=counters)
    pooled = fw.pooled
    _, nu_H = nu_H_at(spec, t, s, state_P.weights, pooled=pooled)

    sv = s * float(spec.sigma1_at(t, s)) if spec.has_brownian_s else 0.0
    z = pooled.z
    d_star = sv * sv + float(np.dot(z * z, fw.nu_star))
    d_full = sv * sv + float(np.dot(z * z, nu_H))
    dead = DENOM_TOL * spec.s0 ** 2
    if d_full <= dead and d_star <= dead:
        raise DegeneracyError(
            f"dead bracket at t={t:.6g}: no diffusion and no jump "
            "activity under either measure")

    if d_star > dead:
        beta_tilde = (sv * fw.h + float(np.dot(z * fw.w, fw.nu_star))) \
            / d_star
    else:
        # the tilt killed every atom the P*-filter can see; the gap term
        # below still recovers the P-bracket answer
        beta_tilde = 0.0
        if counters is not None:
            counters["tilde_dead"] = counters.get("tilde_dead", 0) + 1
    if d_full > dead:
        gap = nu_H - fw.nu_star
        phi = float(np.dot(z * (fw.w - beta_tilde * z), gap)) / d_full
    else:
        phi = 0.0
        if counters is not None:
            counters["phi_dead"] = counters.get("phi_dead", 0) + 1
    return beta_tilde, phi, beta_tilde + phi


# ---------------------------------------------------------------------------
# single-path hedge
# ---------------------------------------------------------------------------

def run_hedge(spec, claim, surface, path, filters):
    """Hedge one P-path: value, strategy, cost, and residual increments.

    ``filters`` is the FilterTrajectory evolved along this path (left
    limits, both measures). The terminal value is the exact payoff. A
    node whose bracket is dead carries the previous hedge ratio forward
    and is counted in counters['carried'].
    """
    grid = path.grid
    n = grid.n_steps
    x_states = spec.x_states
    counters = {}
    if filters.probs_star is None or \
            (spec.marks.m and filters.probs_P is None):
        raise FilterStateError(
            "hedging needs the P*-filter trajectory, and the P-filter "
            "too when the model jumps")

    beta_F = beta_F_path(spec, surface, path)
    beta_tilde = np.zeros(n + 1)
    phi = np.zeros(n + 1)
    beta = np.zeros(n + 1)
    V = np.empty(n + 1)

    for k in range(n + 1):
        t = grid.times[k]
        s = float(path.s_path[k])
        state_star = FilterState("finite", MEASURE_PSTAR, x_states,
                                 filters.probs_star[k], t)
        V[k] = value_process(surface, state_star, t, s)
        try:
            if spec.marks.m:
                state_p = FilterState("finite", MEASURE_P, x_states,
                                      filters.probs_P[k], t)
                bt, ph, b = beta_H_jump(spec, surface, state_star,
                                        state_p, t, s, counters=counters)
            else:
                bt, ph, b = beta_H_continuous(spec, surface, state_star,
                                              t, s)
        except DegeneracyError:
            counters["carried"] = counters.get("carried", 0) + 1
            bt = beta_tilde[k - 1] if k else 0.0
            ph = phi[k - 1] if k else 0.0
            b = beta[k - 1] if k else 0.0
        beta_tilde[k], phi[k], beta[k] = bt, ph, b
    V[n] = float(claim.payoff(path.s_path[n]))

    C = np.empty(n + 1)
    C[0] = V[0]
    ds = np.diff(path.s_path)
    dC = np.diff(V) - beta[:-1] * ds
    C[1:] = C[0] + np.cumsum(dC)
    A_inc = np.concatenate([[0.0], dC])
    return StrategyPath(grid.times.copy(), path.s_path.copy(), beta_F,
                        beta_tilde, phi, beta, V, C, A_inc,
                        V - beta * path.s_path, counters,
                        path_index=path.path_index)


# ---------------------------------------------------------------------------
# vectorized ensemble hedge
# ---------------------------------------------------------------------------

def _hedge_fast_eligible(spec, surface):
    if not spec.is_finite_state or surface.mode != "finite":
        return False
    c = spec.coefficients
    parts = [c.mu1, c.K1, c.K0]
    if c.sigma1 is not None:
        parts.append(c.sigma1)
    for p in parts:
        for var in ("t", "s"):
            if p.depends_on(var):
                return False
    return True


def _time_index_map(surface, grid):
    """Surface row index of every grid node, or None on any mismatch."""
    idx = []
    for t in grid.times:
        hits = np.nonzero(np.isclose(surface.t_values, t, rtol=0.0,
                                     atol=1e-12))[0]
        if hits.size != 1:
            return None
        idx.append(int(hits[0]))
    return np.asarray(idx)


def _inside_surface(spec, surface, ens):
    """True when every visited price and jump destination lies on the
    s-grid (within the surface's own edge tolerance). Outside points
    route to the per-path driver, which raises at the exact node."""
    s_values = surface.s_values
    tol = 1e-9 * max(abs(s_values[0]), abs(s_values[-1]), 1.0)
    lo_need = float(ens.s.min())
    hi_need = float(ens.s.max())
    if spec.marks.m:
        k1 = np.concatenate([np.atleast_1d(np.asarray(
            spec.k1_values(0.0, float(xv), spec.s0), dtype=float))
            for xv in spec.x_states])
        lo_need = min(lo_need, lo_need * (1.0 + float(k1.max())),
                      lo_need * (1.0 + float(k1.min())))
        hi_need = max(hi_need, hi_need * (1.0 + float(k1.max())),
                      hi_need * (1.0 + float(k1.min())))
    return lo_need >= s_values[0] - tol and hi_need <= s_values[-1] + tol


def hedge_ensemble(spec, claim, surface, ens, filters):
    """Hedge a whole P-ensemble; matches run_hedge path by path.

    Vectorizes over paths when the coefficient tables are static in
    (t, s) (the bundled scenarios); otherwise falls back to the per-path
    driver. Also evaluates the full-information strategy, the projected
    drift used by the diagnostics, and the measure density.
    """
    grid = ens.grid
    n_paths, n1 = ens.s.shape
    N = grid.n_steps
    t_idx = _time_index_map(surface, grid)
    meas = mmm_density_ensemble(spec, ens)

    if t_idx is None or not _hedge_fast_eligible(spec, surface) \
            or not _inside_surface(spec, surface, ens):
        paths = [run_hedge(spec, claim, surface, ens.path(i),
                           _TrajView(filters, i)) for i in
                 range(n_paths)]
        return _stack_paths(spec, ens, paths, meas, filters)

    n = spec.n_states
    m = spec.marks.m
    s_values = surface.s_values
    s0 = spec.s0
    eta = spec.marks.weights if m else np.zeros(0)
    sig1 = float(spec.sigma1_at(0.0, s0)) if spec.has_brownian_s else 0.0

    # static per-state tables: jump sizes, destinations, tilted weights
    if m:
        pooled = pooled_atoms(spec, 0.0, s0)
        A = pooled.n_atoms
        k_rel = pooled.k_rel                       # (A,)
        eta_rows = pooled.state_weights            # (n, A)
        star_rows = pooled.star_weights            # (n, A)
        k1_tab = np.empty((n, m))
        dest_tab = np.empty((n, m), dtype=int)
        star_pm = np.empty((n, m))                 # per-(state, mark)
        for i, xv in enumerate(spec.x_states):
            k1_i = np.atleast_1d(np.asarray(
                spec.k1_values(0.0, float(xv), s0), dtype=float))
            k0_i = spec.k0_values(0.0, float(xv))
            av, _ = _alpha_block(spec, 0.0, np.array([float(xv)]),
                                 np.array([s0]))
            k1_tab[i] = k1_i
            for j in range(m):
                dest_tab[i, j] = spec.state_index(
                    spec.snap_state(float(xv) + float(k0_i[j])))
                star_pm[i, j] = max(
                    1.0 - float(av[0]) * s0 * float(k1_i[j]), 0.0) \
                    * eta[j]
    else:
        A = 0
        k_rel = np.zeros(0)
        eta_rows = star_rows = np.zeros((n, 0))

    # drift rate per state is linear in s for static tables
    drift_c = np.array([
        float(spec.mu1_at(0.0, float(xv), s0)) if spec.has_brownian_s
        else 0.0 for xv in spec.x_states])
    if m:
        drift_c = drift_c + k1_tab @ eta

    # full-information per-state constants
    denF_c = sig1 ** 2 + ((k1_tab ** 2) @ eta if m else 0.0)

    state_of = np.argmin(
        np.abs(ens.x[:, :, None] - spec.x_states[None, None, :]), axis=2)

    counters = {}
    dead = DENOM_TOL * s0 ** 2
    rows = np.arange(n_paths)
    shape = (n_paths, N + 1)
    beta_F = np.empty(shape)
    beta_tilde = np.empty(shape)
    phi = np.empty(shape)
    beta = np.empty(shape)
    V = np.empty(shape)
    drift_H = np.empty(shape)

    for k in range(N + 1):
        kt = t_idx[k]
        s = ens.s[:, k]
        pi_star = filters.probs_star[:, k, :]      # (n_paths, n)
        pi_p = filters.probs_P[:, k, :]

        g_rows = [surface.g[i, kt] for i in range(n)]
        gs_rows = [surface.dg_ds[i, kt] for i in range(n)]
        g_here = np.stack([np.interp(s, s_values, g_rows[i])
                           for i in range(n)], axis=1)      # (n_paths, n)
        gs_here = np.stack([np.interp(s, s_values, gs_rows[i])
                            for i in range(n)], axis=1)

        V[:, k] = np.einsum("pi,pi->p", pi_star, g_here)
        h = s * sig1 * np.einsum("pi,pi->p", pi_star, gs_here) \
            if sig1 else np.zeros(n_paths)
        drift_H[:, k] = s * (pi_p @ drift_c)

        sv = s * sig1
        own_gs = gs_here[rows, state_of[:, k]]

        if m:
            # per-atom numerators of w and the per-path value after each
            # (state, mark) jump; beta_F sums run over every S-moving
            # mark, pooled or not
            num_star = np.zeros((n_paths, A))
            num_plain = np.zeros((n_paths, A))
            jumpF = np.zeros((n_paths, n))         # full-info jump sums
            for i in range(n):
                for j in range(m):
                    if k1_tab[i, j] == 0.0:
                        continue
                    post = np.interp(s * (1.0 + k1_tab[i, j]), s_values,
                                     g_rows[dest_tab[i, j]])
                    jumpF[:, i] += s * k1_tab[i, j] \
                        * (post - g_here[:, i]) * eta[j]
                    a = pooled.atom_of[i, j]
                    if a < 0:
                        continue
                    num_star[:, a] += pi_star[:, i] * star_pm[i, j] * post
                    num_plain[:, a] += pi_star[:, i] * eta[j] * post
            nu_star = pi_star @ star_rows          # (n_paths, A)
            nu_plain = pi_star @ eta_rows
            nu_h = pi_p @ eta_rows
            w = np.zeros((n_paths, A))
            live = nu_star > 1e-12
            w[live] = num_star[live] / nu_star[live]
            fb = (~live) & (nu_plain > 1e-12)
            if np.any(fb):
                w[fb] = num_plain[fb] / nu_plain[fb]
                counters["w_fallback"] = counters.get("w_fallback", 0) \
                    + int(fb.sum())
            sub = live | fb
            w[sub] -= np.broadcast_to(V[:, k, None], w.shape)[sub]

            z = s[:, None] * k_rel[None, :]
            d_star = sv ** 2 + np.einsum("pa,pa->p", z * z, nu_star)
            d_full = sv ** 2 + np.einsum("pa,pa->p", z * z, nu_h)
            ok = d_star > dead
            okf = d_full > dead
            bt = np.zeros(n_paths)
            bt[ok] = (sv[ok] * h[ok]
                      + np.einsum("pa,pa->p", (z * w)[ok], nu_star[ok])) \
                / d_star[ok]
            n_td = int(((~ok) & okf).sum())
            if n_td:
                counters["tilde_dead"] = counters.get("tilde_dead", 0) \
                    + n_td
            gap = nu_h - nu_star
            ph = np.zeros(n_paths)
            ph[okf] = np.einsum(
                "pa,pa->p", (z * (w - bt[:, None] * z))[okf], gap[okf]) \
                / d_full[okf]
            n_pd = int((ok & (~okf)).sum())
            if n_pd:
                counters["phi_dead"] = counters.get("phi_dead", 0) + n_pd
            both_dead = (~ok) & (~okf)
            if np.any(both_dead):
                # carry the previous node's values forward
                counters["carried"] = counters.get("carried", 0) \
                    + int(both_dead.sum())
                if k:
                    bt[both_dead] = beta_tilde[both_dead, k - 1]
                    ph[both_dead] = phi[both_dead, k - 1]
            beta_tilde[:, k] = bt
            phi[:, k] = ph
            beta[:, k] = bt + ph

            numF = sv ** 2 * own_gs + jumpF[rows, state_of[:, k]]
            denF = s ** 2 * denF_c[state_of[:, k]]
            beta_F[:, k] = numF / denF
        else:
            bH = np.einsum("pi,pi->p", pi_star, gs_here)
            beta_tilde[:, k] = bH
            phi[:, k] = 0.0
            beta[:, k] = bH
            beta_F[:, k] = own_gs

    V[:, -1] = np.asarray(claim.payoff(ens.s[:, -1]), dtype=float)
    C = np.empty(shape)
    C[:, 0] = V[:, 0]
    dC = np.diff(V, axis=1) - beta[:, :-1] * np.diff(ens.s, axis=1)
    C[:, 1:] = C[:, :1] + np.cumsum(dC, axis=1)
    A_inc = np.concatenate([np.zeros((n_paths, 1)), dC], axis=1)
    return StrategyEnsemble(
        grid.times.copy(), ens.s.copy(), beta_F, beta_tilde, phi, beta,
        V, C, A_inc, V - beta * ens.s, drift_H, meas.L, meas.excluded,
        counters)


class _TrajView:
    """Single-path slice of an ensemble FilterTrajectory."""

    def __init__(self, traj, i):
        self.x_values = traj.x_values
        self.probs_P = None if traj.probs_P is None else traj.probs_P[i]
        self.probs_star = None if traj.probs_star is None \
            else traj.probs_star[i]


def _drift_H_nodes(spec, ens, filters):
    """Filter-projected P-drift rate of S at every (path, node)."""
    n_paths, n1 = ens.s.shape
    n = spec.n_states
    eta = spec.marks.weights
    out = np.zeros((n_paths, n1))
    for k in range(n1):
        t = getattr(ens, "t_offset", 0.0) + ens.grid.times[k]
        s = ens.s[:, k]
        rates = np.empty((n_paths, n))
        for i, xv in enumerate(spec.x_states):
            r = np.zeros(n_paths)
            if spec.has_brownian_s:
                r += s * np.broadcast_to(np.asarray(
                    spec.mu1_at(t, float(xv), s), dtype=float), s.shape)
            if spec.marks.m:
                k1 = spec.k1_values(t, float(xv), s)     # (m, n_paths)
                r += eta @ (s[None, :] * k1)
            rates[:, i] = r
        out[:, k] = np.einsum("pi,pi->p", filters.probs_P[:, k, :],
                              rates)
    return out


def _stack_paths(spec, ens, paths, meas, filters):
    def stack(name):
        return np.stack([getattr(p, name) for p in paths])

    grid = ens.grid
    counters = {}
    for p in paths:
        for key, val in p.counters.items():
            counters[key] = counters.get(key, 0) + val
    return StrategyEnsemble(
        grid.times.copy(), ens.s.copy(), stack("beta_F"),
        stack("beta_tilde_H"), stack("phi_H"), stack("beta_H"),
        stack("V"), stack("C"), stack("A_increment"), stack("riskless"),
        _drift_H_nodes(spec, ens, filters), meas.L, meas.excluded,
        counters)


# ---------------------------------------------------------------------------
# brute-force one-step oracle
# ---------------------------------------------------------------------------

def one_step_quadratic_minimizer(spec, surface, state_star, state_P, t, s):
    """Enumerated minimizer of the local expected squared cost rate.

    Builds q(theta) = (h - theta s sig1)^2 + sum_a (w_a - theta z_a)^2
    nu_a by walking every observable jump outcome directly: for each
    atom, the post-jump filter is the Bayes update of the P*-filter and
    the value move w_a is read off the surface, with its own inline
    pooling and tilt algebra (nothing shared with the strategy kernels
    beyond the surface itself). q is evaluated at theta = 0, 1, 2 and
    the parabola vertex is returned.
    """
    s = float(s)
    probs_star = np.asarray(state_star.weights, dtype=float)
    probs_p = np.asarray(state_P.weights, dtype=float)
    xs = [float(xv) for xv in spec.x_states]
    n = len(xs)
    m = spec.marks.m
    eta = spec.marks.weights

    pi_g = sum(probs_star[i] * surface.value(t, xs[i], s)
               for i in range(n))

    # inline alpha per state: drift rate over bracket rate
    sig1 = float(spec.sigma1_at(t, s)) if spec.has_brownian_s else 0.0
    alpha = np.zeros(n)
    for i in range(n):
        drift = s * float(spec.mu1_at(t, xs[i], s)) \
            if spec.has_brownian_s else 0.0
        brack = (s * sig1) ** 2
        if m:
            k1_i = np.atleast_1d(np.asarray(spec.k1_values(t, xs[i], s),
                                            dtype=float))
            drift += float(np.dot(s * k1_i, eta))
            brack += float(np.dot((s * k1_i) ** 2, eta))
        alpha[i] = drift / brack if brack > 0 else 0.0

    # collect (state, mark) moves and pool equal S-displacements
    moves = []                          # (z, state, eta_j, eta*_j, g_post)
    for i in range(n):
        if m == 0:
            break
        k1_i = np.atleast_1d(np.asarray(spec.k1_values(t, xs[i], s),
                                        dtype=float))
        k0_i = spec.k0_values(t, xs[i])
        for j in range(m):
            z = s * float(k1_i[j])
            if z == 0.0:
                continue
            dest = spec.snap_state(xs[i] + float(k0_i[j]))
            g_post = surface.value(t, dest, s + z)
            tilt = max(1.0 - alpha[i] * z, 0.0)
            moves.append((z, i, float(eta[j]), tilt * float(eta[j]),
                          g_post))

    atoms = {}
    for z, i, e, es, gp in moves:
        key = round(z / s, 12)
        atoms.setdefault(key, []).append((z, i, e, es, gp))

    jump_terms = []                     # (z_a, w_a, nu_a)
    for members in atoms.values():
        z_a = members[0][0]
        nu_a = sum(probs_p[i] * e for _, i, e, _, _ in members)
        nu_star_a = sum(probs_star[i] * es for _, i, _, es, _ in members)
        if nu_star_a > 1e-12:
            v_post = sum(probs_star[i] * es * gp
                         for _, i, _, es, gp in members) / nu_star_a
        else:
            plain = sum(probs_star[i] * e for _, i, e, _, _ in members)
            if plain <= 1e-12:
                continue
            v_post = sum(probs_star[i] * e * gp
                         for _, i, e, _, gp in members) / plain
        jump_terms.append((z_a, v_post - pi_g, nu_a))

    h = 0.0
    if sig1:
        h = s * sig1 * sum(probs_star[i] * surface.slope(t, xs[i], s)
                           for i in range(n))

    def q(theta):
        val = (h - theta * s * sig1) ** 2
        for z_a, w_a, nu_a in jump_terms:
            val += (w_a - theta * z_a) ** 2 * nu_a
        return val

    q0, q1, q2 = q(0.0), q(1.0), q(2.0)
    a2 = (q2 - 2.0 * q1 + q0) / 2.0
    if a2 <= 0.0:
        raise DegeneracyError("one-step quadratic is not strictly convex")
    b = q1 - q0 - a2
    return -b / (2.0 * a2)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _tstats_ols(y, X):
    """Classic OLS t-statistics with White (HC0) standard errors."""
    XtX = X.T @ X
    XtX_inv = np.linalg.pinv(XtX)
    b = XtX_inv @ (X.T @ y)
    resid = y - X @ b
    meat = (X * resid[:, None] ** 2).T @ X
    cov = XtX_inv @ meat @ XtX_inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, b / se, 0.0)
    return b, se, t


def _mean_se(y):
    mu = float(np.mean(y))
    se = float(np.std(y, ddof=1) / np.sqrt(y.size)) if y.size > 1 else 0.0
    return mu, se


def diagnostics(strats, filters, spec, claim_label=""):
    """Hedge-quality report over a strategy ensemble.

    (a) cost-martingale test: pooled regression of cost increments on
        left-node observables (constant, price, filter components minus
        the last, which is redundant given the constant), HC0 t-stats;
    (b) orthogonality: E[A_T * sum phi dN] per test integrand, with the
        observable martingale increment dN = dS - projected-drift*dt;
    (c) projection identity (continuous models): density-weighted
        E*[(beta_H - beta_F) psi] per test function psi;
    (d) terminal cost variance for the restricted hedge, the
        full-information hedge, and no hedge at all.
    """
    n_paths = strats.n_paths
    if n_paths < 100:
        raise SampleSizeError(
            f"diagnostics needs at least 100 paths, got {n_paths}")
    times = strats.times
    dt = float(times[1] - times[0])
    N = times.size - 1
    s_left = strats.s[:, :-1]
    pi_p_left = filters.probs_P[:, :-1, :]        # (n, N, n_states)
    n_states = pi_p_left.shape[2]

    dC = np.diff(strats.C, axis=1)
    ds = np.diff(strats.s, axis=1)
    dN = ds - strats.drift_H[:, :-1] * dt

    # (a) pooled cost-increment regression
    basis_cols = [np.ones_like(s_left), s_left]
    basis_names = ["const", "s"]
    for i in range(n_states - 1):
        basis_cols.append(pi_p_left[:, :, i])
        basis_names.append(f"filter_{i}")
    X = np.stack([c.reshape(-1) for c in basis_cols], axis=1)
    coef, se, t = _tstats_ols(dC.reshape(-1), X)
    cost_test = {nm: {"coef": float(c), "se": float(e), "t": float(tv)}
                 for nm, c, e, tv in zip(basis_names, coef, se, t)}

    # (b) orthogonality of the residual against N-integrals
    A_T = strats.C[:, -1] - strats.C[:, 0]
    ortho = {}
    test_fns = {"const": np.ones_like(s_left), "s": s_left}
    for i in range(n_states):
        test_fns[f"filter_{i}"] = pi_p_left[:, :, i]
    for nm, phi_fn in test_fns.items():
        G = np.einsum("pk,pk->p", phi_fn, dN)
        mu, sem = _mean_se(A_T * G)
        ortho[nm] = {"value": mu, "se": sem,
                     "z": mu / sem if sem > 0 else 0.0}

    # (c) projection identity, continuous models only
    projection = None
    if spec.marks.m == 0:
        gap = strats.beta_H - strats.beta_F
        L_left = strats.L[:, :-1]
        projection = {}
        for nm, psi in test_fns.items():
            y = np.einsum("pk,pk->p", L_left * gap[:, :-1], psi) * dt
            mu, sem = _mean_se(y)
            projection[nm] = {"value": mu, "se": sem,
                              "z": mu / sem if sem > 0 else 0.0}

    # (d) variance comparison
    V_span = strats.V[:, -1] - strats.V[:, 0]
    cT = {
        "beta_H": strats.C[:, -1] - strats.C[:, 0],
        "beta_F": V_span - np.einsum("pk,pk->p", strats.beta_F[:, :-1],
                                     ds),
        "zero": V_span,
    }
    variances = {nm: {"var": float(np.var(v, ddof=1)),
                      "mean": float(np.mean(v))}
                 for nm, v in cT.items()}

    mu_A, se_A = _mean_se(A_T)
    report = {
        "claim": claim_label,
        "n_paths": int(n_paths),
        "n_steps": int(N),
        "U0": float(np.mean(strats.V[:, 0])),
        "U0_spread": float(np.ptp(strats.V[:, 0])),
        "terminal_cost": {"mean": mu_A, "se": se_A,
                          "var": float(np.var(A_T, ddof=1))},
        "cost_increment_regression": cost_test,
        "orthogonality": ortho,
        "projection_identity": projection,
        "variance_comparison": variances,
        "mmm_exclusion_fraction": float(np.mean(strats.excluded)),
        "counters": {k: int(v) for k, v in strats.counters.items()},
    }
    return report


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------

def write_strategy_csv(fname, strats):
    """One row per (path, node) with the strategy components."""
    with open(fname, "w") as fh:
        fh.write("path_id,step,t,s,beta_F,beta_tilde_H,phi_H,beta_H,V,C\n")
        n_paths = strats.n_paths
        for p in range(n_paths):
            for k, t in enumerate(strats.times):
                fh.write(
                    "%d,%d,%.12g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                    "%.17g\n" % (
                        p, k, t, strats.s[p, k], strats.beta_F[p, k],
                        strats.beta_tilde_H[p, k], strats.phi_H[p, k],
                        strats.beta_H[p, k], strats.V[p, k],
                        strats.C[p, k]))


def write_hedge_report(fname, report):
    """JSON dump with a stable key order."""
    with open(fname, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
