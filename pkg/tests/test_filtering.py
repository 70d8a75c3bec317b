"""Tests for the latent-state filters.

The centerpiece is the enumeration oracle: on a small finite-state model
the per-step prediction-correction engine must reproduce brute-force
Bayes over whole latent paths to 1e-10, under both measures. The
brute-force code below is written from the model definition alone and
shares nothing with the engine's recursion.
"""

import itertools

import numpy as np
import pytest
from scipy.linalg import expm
from scipy import stats

from hedgelab.errors import (
    EmptyCloudError, FilterStateError, SupportError,
)
from hedgelab.filtering import (
    FilterState, StepObservation, exact_filter_step, filter_expectation,
    filter_under_P_step, finite_prior, jump_update_weights,
    make_observation, make_observations, nu_star_H, particle_filter_step,
    particle_prior, particle_state_law, run_filters_along_path,
    run_filters_ensemble, tv_distance, write_filters_csv,
    _fast_path_eligible,
)
from hedgelab.models import CoefficientSet, MarkSpace, ModelSpec, TimeGrid
from hedgelab.simulate import RngStream, simulate_ensemble
from hedgelab.structure import mmm_density_ensemble, pooled_atoms


# ---------------------------------------------------------------------------
# reference specs
# ---------------------------------------------------------------------------

def drift_spec(q=0.0, prior=(0.5, 0.5), gap=0.2):
    """Hidden-drift diffusion: drift 0 or `gap` depending on the state."""
    return ModelSpec(
        "diffusion",
        CoefficientSet(mu1=f"{gap}*x", sigma1=0.2),
        x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-q, q], [q, -q]]),
        x0=0.0, s0=1.0,
        x0_prior=np.asarray(prior, dtype=float))


def swapped_spec(prior=(0.6, 0.4)):
    """Pure-jump two-state model with swapped jump sizes: both states see
    the same two atoms (-7% and +10%) but with swapped intensities, so
    jumps are informative without being revealing."""
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([3.0, 2.0]))
    return ModelSpec(
        "pure_jump",
        CoefficientSet(K1=["0.1 - 0.17*x", "-0.07 + 0.17*x"]),
        marks=marks,
        x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.5, 0.5], [0.7, -0.7]]),
        x0=0.0, s0=1.0,
        x0_prior=np.asarray(prior, dtype=float))


def no_jump_obs(spec, t, s, dt, r):
    pooled = pooled_atoms(spec, t, s)
    return StepObservation(t, s, dt, np.zeros(pooled.n_atoms,
                                              dtype=np.int64),
                           pooled, r, s * (1.0 + r))


# ---------------------------------------------------------------------------
# one-step Bayes examples
# ---------------------------------------------------------------------------

def test_one_step_posterior_under_p():
    # prior (.5,.5), drifts {0, .2}, sigma1=.2, dt=.01, dS/S=.002:
    # the posterior tilts toward the matching drift by e^{-0.005}
    spec = drift_spec()
    st = finite_prior(spec, "P")
    out = filter_under_P_step(spec, st, no_jump_obs(spec, 0.0, 1.0, 0.01,
                                                    0.002))
    assert out.weights == pytest.approx([0.49875, 0.50125], abs=1e-5)
    assert out.t == pytest.approx(0.01)


def test_one_step_posterior_under_pstar_is_uninformative():
    # the martingale change of measure removes the drift state by state,
    # so with rho=0 the continuous observation carries no information
    spec = drift_spec()
    st = finite_prior(spec, "Pstar")
    out = exact_filter_step(spec, st, no_jump_obs(spec, 0.0, 1.0, 0.01,
                                                  0.002))
    np.testing.assert_allclose(out.weights, [0.5, 0.5], atol=1e-12)


def test_equal_drifts_propagate_the_prior():
    spec = ModelSpec(
        "diffusion", CoefficientSet(mu1=0.1, sigma1=0.2),
        x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.8, 0.8], [0.3, -0.3]]),
        x0_prior=np.array([0.7, 0.3]), s0=1.0)
    st = finite_prior(spec, "P")
    out = exact_filter_step(spec, st, no_jump_obs(spec, 0.0, 1.0, 0.05,
                                                  0.01))
    expected = st.weights @ expm(spec.x_generator * 0.05)
    np.testing.assert_allclose(out.weights, expected, atol=1e-14)


def test_dirac_prior_is_a_fixed_point_without_dynamics():
    spec = drift_spec(q=0.0, prior=(1.0, 0.0))
    for measure in ("P", "Pstar"):
        st = finite_prior(spec, measure)
        out = exact_filter_step(spec, st,
                                no_jump_obs(spec, 0.0, 1.0, 0.01, 0.004))
        np.testing.assert_allclose(out.weights, [1.0, 0.0], atol=1e-15)


def test_mode_and_measure_guards():
    spec = drift_spec()
    st = finite_prior(spec, "Pstar")
    with pytest.raises(FilterStateError):
        filter_under_P_step(spec, st, no_jump_obs(spec, 0, 1.0, 0.01, 0.0))
    cloud = particle_prior(spec, "P", 8, np.random.default_rng(0))
    with pytest.raises(FilterStateError):
        exact_filter_step(spec, cloud, no_jump_obs(spec, 0, 1.0, 0.01, 0.0))


# ---------------------------------------------------------------------------
# enumeration oracle: filter == brute-force Bayes over latent paths
# ---------------------------------------------------------------------------

def _brute_force_left_limits(prior, T, liks):
    """Left-limit filter laws by enumerating whole latent paths.

    liks[k, i] is the likelihood of step k's observation in state i.
    Entry k of the result conditions on observations 0..k-1 only.
    """
    n = prior.size
    N = liks.shape[0]
    out = [np.asarray(prior, dtype=float)]
    for k in range(1, N + 1):
        probs = np.zeros(n)
        for seq in itertools.product(range(n), repeat=k + 1):
            p = prior[seq[0]]
            for step in range(k):
                p *= liks[step, seq[step]] * T[seq[step], seq[step + 1]]
            probs[seq[k]] += p
        out.append(probs / probs.sum())
    return np.array(out)


def _swapped_intensities(spec, s):
    """Per-state atom intensity rows for swapped_spec, derived from the
    coefficient definitions only (atoms ascending: down then up)."""
    eta = spec.marks.weights
    rows_P = np.empty((2, 2))
    rows_star = np.empty((2, 2))
    for i, xv in enumerate(spec.x_states):
        k1 = np.array([spec.coefficients.K1(t=0.0, x=xv, s=s, zeta=zt)
                       for zt in spec.marks.marks])
        order = np.argsort(k1)            # down atom first
        rows_P[i] = eta[order]
        # pure-jump premium: alpha z = k (sum K eta)/(sum K^2 eta)
        ratio = np.dot(k1, eta) / np.dot(k1 * k1, eta)
        rows_star[i] = (1.0 - k1[order] * ratio) * eta[order]
    return rows_P, rows_star


def test_filter_matches_path_enumeration_both_measures():
    spec = swapped_spec()
    grid = TimeGrid(0.75, 3)

    # pick the first seed whose single path carries at least two jumps
    for seed in range(40):
        ens = simulate_ensemble(spec, grid, "P", 1, RngStream(seed))
        if ens.counts.sum() >= 2:
            break
    path = ens.path(0)
    obs_list = make_observations(spec, path)

    T = expm(spec.x_generator * grid.dt)
    for measure, row_pick in (("P", 0), ("Pstar", 1)):
        rows = _swapped_intensities(spec, 1.0)[row_pick]
        liks = np.empty((3, 2))
        for k, obs in enumerate(obs_list):
            # atom intensities scale with the left price only through z,
            # and the tilt is scale-free, so the rows apply at every s
            for i in range(2):
                liks[k, i] = np.prod(stats.poisson.pmf(
                    obs.atom_counts, rows[i] * grid.dt))
        want = _brute_force_left_limits(spec.x0_prior, T, liks)

        tr = run_filters_along_path(spec, path, measures=(measure,))
        got = tr.probs_P if measure == "P" else tr.probs_star
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_ensemble_driver_matches_per_path_engine():
    spec = swapped_spec()
    grid = TimeGrid(0.6, 6)
    assert _fast_path_eligible(spec, grid)
    for measure in ("P", "Pstar"):
        ens = simulate_ensemble(spec, grid, measure, 16, RngStream(11))
        fast = run_filters_ensemble(spec, ens)
        for i in range(ens.n_paths):
            slow = run_filters_along_path(spec, ens.path(i))
            np.testing.assert_allclose(fast.probs_P[i], slow.probs_P,
                                       atol=1e-12)
            np.testing.assert_allclose(fast.probs_star[i],
                                       slow.probs_star, atol=1e-12)


def test_ensemble_driver_handles_x_displacing_jumps():
    # jumps that move the latent state route through cached per-pattern
    # transition matrices; the result must still match the per-path
    # engine exactly
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([2.0, 1.5]))
    spec = ModelSpec(
        "jump_diffusion",
        CoefficientSet(mu1="0.02 + 0.05*x", sigma1=0.2,
                       K1=["0.1 - 0.17*x", "-0.07 + 0.17*x"],
                       K0=["1 - 2*x", "1 - 2*x"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.5, 0.5], [0.7, -0.7]]),
        s0=1.0, x0_prior=np.array([0.6, 0.4]))
    grid = TimeGrid(0.75, 12)
    assert _fast_path_eligible(spec, grid)
    for measure in ("P", "Pstar"):
        ens = simulate_ensemble(spec, grid, measure, 24, RngStream(17))
        fast = run_filters_ensemble(spec, ens)
        for i in range(ens.n_paths):
            slow = run_filters_along_path(spec, ens.path(i))
            np.testing.assert_allclose(fast.probs_P[i], slow.probs_P,
                                       atol=1e-12)
            np.testing.assert_allclose(fast.probs_star[i],
                                       slow.probs_star, atol=1e-12)


def test_fast_path_rejects_time_dependent_x_displacements():
    marks = MarkSpace(np.array([0.0]), np.array([1.0]))
    spec = ModelSpec(
        "jump_diffusion",
        CoefficientSet(mu1=0.0, sigma1=0.2, K1=[0.1],
                       K0=["(1 - 2*x)*(1 + 0*t)"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.zeros((2, 2)), s0=1.0)
    assert not _fast_path_eligible(spec, TimeGrid(1.0, 4))


# ---------------------------------------------------------------------------
# start-state law
# ---------------------------------------------------------------------------

def test_simulator_draws_the_start_state_from_the_prior():
    spec = drift_spec(q=0.0, prior=(0.3, 0.7))
    grid = TimeGrid(0.1, 2)
    ens = simulate_ensemble(spec, grid, "P", 4000, RngStream(5))
    frac = float(np.mean(ens.x[:, 0] == 1.0))
    se = np.sqrt(0.3 * 0.7 / 4000)
    assert abs(frac - 0.7) < 4 * se
    # an explicit start point overrides the prior
    ens2 = simulate_ensemble(spec, grid, "P", 64, RngStream(5), x0=1.0)
    assert np.all(ens2.x[:, 0] == 1.0)


def test_bad_priors_are_rejected():
    with pytest.raises(ValueError):
        drift_spec(prior=(0.4, 0.4))
    with pytest.raises(ValueError):
        drift_spec(prior=(-0.1, 1.1))


# ---------------------------------------------------------------------------
# common jumps: observed atoms move the latent state
# ---------------------------------------------------------------------------

def toggle_spec():
    """An up-jump toggles the latent state (K0 = +1 / -1); a second mark
    keeps two atoms alive so the premium stays off the tilt boundary."""
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([2.0, 4.0]))
    return ModelSpec(
        "pure_jump",
        CoefficientSet(K1=[0.1, -0.05], K0=["1 - 2*x", "0"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.zeros((2, 2)), x0=0.0, s0=1.0,
        x0_prior=np.array([0.7, 0.3]))


def test_observed_common_jump_toggles_the_filter():
    spec = toggle_spec()
    pooled = pooled_atoms(spec, 0.0, 1.0)
    up = int(np.argmax(pooled.z))

    counts = np.zeros(pooled.n_atoms, dtype=np.int64)
    counts[up] = 1
    obs = StepObservation(0.0, 1.0, 0.1, counts, pooled, 0.0, 1.1)
    st = finite_prior(spec, "P")
    out = exact_filter_step(spec, st, obs)
    np.testing.assert_allclose(out.weights, [0.3, 0.7], atol=1e-12)

    counts2 = counts.copy()
    counts2[up] = 2                      # toggle twice: back where we were
    obs2 = StepObservation(0.0, 1.0, 0.1, counts2, pooled, 0.0, 1.21)
    out2 = exact_filter_step(spec, st, obs2)
    np.testing.assert_allclose(out2.weights, [0.7, 0.3], atol=1e-12)


def test_particle_cloud_follows_the_common_jump():
    spec = toggle_spec()
    pooled = pooled_atoms(spec, 0.0, 1.0)
    up = int(np.argmax(pooled.z))
    counts = np.zeros(pooled.n_atoms, dtype=np.int64)
    counts[up] = 1
    obs = StepObservation(0.0, 1.0, 0.1, counts, pooled, 0.0, 1.1)
    rng = np.random.default_rng(3)
    cloud = particle_prior(spec, "P", 4000, rng)
    start = particle_state_law(spec, cloud)
    out = particle_filter_step(spec, cloud, obs, rng)
    law = particle_state_law(spec, out)
    np.testing.assert_allclose(law, start[::-1], atol=1e-12)


# ---------------------------------------------------------------------------
# support errors
# ---------------------------------------------------------------------------

def test_impossible_residual_raises_in_pure_jump():
    spec = swapped_spec()
    with pytest.raises(SupportError):
        exact_filter_step(spec, finite_prior(spec, "P"),
                          no_jump_obs(spec, 0.0, 1.0, 0.25, 0.05))


def one_sided_spec():
    """Jumps exist only in state 0; state 1 is a plain diffusion."""
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
    return ModelSpec(
        "jump_diffusion",
        CoefficientSet(mu1=0.0, sigma1=0.2,
                       K1=["0.1*(1 - x)", "-0.05*(1 - x)"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.3, 0.3], [0.4, -0.4]]),
        x0=0.0, s0=1.0, x0_prior=np.array([0.5, 0.5]))


def test_jump_impossible_under_every_supported_state_raises():
    spec = one_sided_spec()
    pooled = pooled_atoms(spec, 0.0, 1.0)
    counts = np.zeros(pooled.n_atoms, dtype=np.int64)
    counts[int(np.argmax(pooled.z))] = 1
    obs = StepObservation(0.0, 1.0, 0.05, counts, pooled, 0.0, 1.1)
    dirac = FilterState("finite", "P", spec.x_states,
                        np.array([0.0, 1.0]))
    with pytest.raises(SupportError):
        exact_filter_step(spec, dirac, obs)


def test_jump_identifies_the_only_supporting_state():
    spec = one_sided_spec()
    pooled = pooled_atoms(spec, 0.0, 1.0)
    counts = np.zeros(pooled.n_atoms, dtype=np.int64)
    counts[int(np.argmax(pooled.z))] = 1
    obs = StepObservation(0.0, 1.0, 0.05, counts, pooled, 0.0, 1.1)
    out = exact_filter_step(spec, finite_prior(spec, "P"), obs)
    # collapse onto state 0, then one chain move
    expected = expm(spec.x_generator * 0.05)[0]
    np.testing.assert_allclose(out.weights, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# particle engine against the exact engine
# ---------------------------------------------------------------------------

def test_particle_filter_tracks_the_exact_filter():
    spec = swapped_spec()
    grid = TimeGrid(1.0, 8)
    for seed in range(40):
        ens = simulate_ensemble(spec, grid, "P", 1, RngStream(seed))
        if ens.counts.sum() >= 3:
            break
    path = ens.path(0)
    obs_list = make_observations(spec, path)
    exact = run_filters_along_path(spec, path, measures=("P",)).probs_P

    def mean_terminal_tv(n_particles, n_reps):
        tvs = []
        for rep in range(n_reps):
            rng = np.random.default_rng(1000 + rep)
            cloud = particle_prior(spec, "P", n_particles, rng)
            for obs in obs_list:
                cloud = particle_filter_step(spec, cloud, obs, rng)
            tvs.append(tv_distance(particle_state_law(spec, cloud),
                                   exact[-1]))
        return float(np.mean(tvs))

    tv_small = mean_terminal_tv(100, 8)
    tv_big = mean_terminal_tv(4000, 4)
    assert tv_big < 0.02
    assert tv_small > tv_big             # error shrinks with the cloud


def test_particle_validations():
    spec = swapped_spec()
    rng = np.random.default_rng(0)
    with pytest.raises(EmptyCloudError):
        particle_prior(spec, "P", 0, rng)
    with pytest.raises(FilterStateError):
        FilterState("particle", "P", np.zeros(4),
                    np.array([0.5, 0.5, 0.5, -0.5]))
    st = finite_prior(spec, "P")
    with pytest.raises(FilterStateError):
        particle_filter_step(spec, st, no_jump_obs(spec, 0, 1.0, 0.1, 0.0),
                             rng)


# ---------------------------------------------------------------------------
# expectations and correction weights
# ---------------------------------------------------------------------------

def test_filter_expectation_weighted_sum():
    spec = drift_spec(prior=(0.25, 0.75))
    st = finite_prior(spec, "Pstar")
    got = filter_expectation(st, lambda t, x, s: x * s + t, 2.0, 10.0)
    assert got == pytest.approx(0.75 * 10.0 + 2.0, abs=1e-14)


def test_filter_state_validation():
    with pytest.raises(FilterStateError):
        FilterState("finite", "P", np.array([0.0, 1.0]),
                    np.array([0.6, 0.6]))
    with pytest.raises(EmptyCloudError):
        FilterState("finite", "P", np.zeros(0), np.zeros(0))


def shared_atom_spec():
    """Both states see one +10% atom; intensities 1 vs 3 and premiums
    alpha z = 0.1 vs 0.2, so the projected tilted weight has the hand
    value 0.25*0.9*1 + 0.75*0.8*3 = 2.025 at filter (0.25, 0.75)."""
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    return ModelSpec(
        "jump_diffusion",
        CoefficientSet(mu1="-0.05 - 0.11*x", sigma1=0.2,
                       K1=["0.1*(1 - x)", "0.1*x"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.zeros((2, 2)), s0=1.0,
        x0_prior=np.array([0.25, 0.75]))


def test_projected_tilted_atom_weight_hand_value():
    spec = shared_atom_spec()
    st = finite_prior(spec, "Pstar")
    pooled, nu = nu_star_H(spec, 0.0, 1.0, st)
    assert pooled.n_atoms == 1
    assert nu[0] == pytest.approx(2.025, abs=1e-12)


def test_jump_weights_for_the_identity_and_a_constant():
    spec = swapped_spec(prior=(0.6, 0.4))
    st = finite_prior(spec, "Pstar")
    fw = jump_update_weights(spec, 0.0, 1.0, st,
                             f=lambda t, x, s: s,
                             f_s=lambda t, x, s: 1.0)
    np.testing.assert_allclose(fw.w, fw.pooled.z, atol=1e-8)
    assert fw.h == 0.0                   # pure jump: no Brownian channel

    fw_c = jump_update_weights(spec, 0.0, 1.0, st,
                               f=lambda t, x, s: 3.5,
                               f_s=lambda t, x, s: 0.0)
    np.testing.assert_allclose(fw_c.w, 0.0, atol=1e-14)
    assert fw_c.h == 0.0


def test_brownian_correction_weight_hand_value():
    spec = shared_atom_spec()
    st = finite_prior(spec, "Pstar")
    fw = jump_update_weights(spec, 0.0, 2.0, st,
                             f=lambda t, x, s: s * s,
                             f_s=lambda t, x, s: 2.0 * s)
    # h = s sigma1 pi(f_s) = 2 * 0.2 * 4
    assert fw.h == pytest.approx(1.6, abs=1e-12)


def test_zero_tilt_atom_falls_back_to_untilted_weights():
    # single visible atom in state 0: the martingale tilt removes it
    # exactly, so w falls back to the untilted intensities there
    marks = MarkSpace(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
    spec = ModelSpec(
        "pure_jump",
        CoefficientSet(K1=["0.1", "0.2*x"]),
        marks=marks, x_states=np.array([0.0, 1.0]),
        x_generator=np.zeros((2, 2)), x0=0.0, s0=1.0)
    st = FilterState("finite", "Pstar", spec.x_states,
                     np.array([1.0, 0.0]))
    counters = {}
    fw = jump_update_weights(spec, 0.0, 1.0, st,
                             f=lambda t, x, s: s,
                             counters=counters)
    # state 0's only visible atom is z = 0.1 (the 0.2 atom belongs to
    # state 1, which carries no filter mass here)
    a = int(np.argmin(np.abs(fw.pooled.z - 0.1)))
    assert fw.nu_star[a] == pytest.approx(0.0, abs=1e-12)
    assert fw.fallback[a]
    assert counters["w_fallback"] == 1
    assert fw.w[a] == pytest.approx(0.1, abs=1e-9)


# ---------------------------------------------------------------------------
# statistical invariants
# ---------------------------------------------------------------------------

def test_filter_tower_property_is_centered():
    # E[pi_{k+1}(f) | observations to k] = pi_k(expm(Q dt) f): the sample
    # mean of the discrepancy must vanish within 4 standard errors
    spec = swapped_spec()
    grid = TimeGrid(0.6, 6)
    for measure in ("P", "Pstar"):
        ens = simulate_ensemble(spec, grid, measure, 10_000,
                                RngStream(23))
        tr = run_filters_ensemble(spec, ens, measures=(measure,))
        probs = tr.probs_P if measure == "P" else tr.probs_star
        chain = expm(spec.x_generator * grid.dt)
        f = np.array([0.0, 1.0])
        gaps = probs[:, 1:, :] @ f - (probs[:, :-1, :] @ chain) @ f
        flat = gaps.sum(axis=1)          # one draw per path
        se = flat.std(ddof=1) / np.sqrt(flat.size)
        assert abs(flat.mean()) < 4 * se, measure


def test_reweighted_p_paths_match_pstar_filter_statistics():
    # E_P[L_T phi(obs)] = E_P*[phi(obs)] for the H-measurable functional
    # phi = terminal P*-filter mass of state 1
    spec = swapped_spec()
    grid = TimeGrid(0.5, 5)
    n = 4000

    ens_p = simulate_ensemble(spec, grid, "P", n, RngStream(31))
    dens = mmm_density_ensemble(spec, ens_p)
    phi_p = run_filters_ensemble(
        spec, ens_p, measures=("Pstar",)).probs_star[:, -1, 1]
    lhs = dens.L[:, -1] * phi_p

    ens_q = simulate_ensemble(spec, grid, "Pstar", n,
                              RngStream(31).child(9))
    phi_q = run_filters_ensemble(
        spec, ens_q, measures=("Pstar",)).probs_star[:, -1, 1]

    se = np.sqrt(lhs.var(ddof=1) / n + phi_q.var(ddof=1) / n)
    assert abs(lhs.mean() - phi_q.mean()) < 4 * se


def test_hidden_drift_filter_learns_the_true_state():
    # strong drift gap: after a year the P-filter should favor the truth
    spec = drift_spec(q=0.0, prior=(0.5, 0.5), gap=0.8)
    grid = TimeGrid(1.0, 50)
    ens = simulate_ensemble(spec, grid, "P", 200, RngStream(2))
    tr = run_filters_ensemble(spec, ens, measures=("P",))
    truth = ens.x[:, 0]
    mass_on_truth = np.where(truth == 1.0, tr.probs_P[:, -1, 1],
                             tr.probs_P[:, -1, 0])
    assert mass_on_truth.mean() > 0.75


# ---------------------------------------------------------------------------
# csv dump
# ---------------------------------------------------------------------------

def test_write_filters_csv(tmp_path):
    spec = swapped_spec()
    grid = TimeGrid(0.2, 2)
    ens = simulate_ensemble(spec, grid, "P", 2, RngStream(1))
    tr = run_filters_ensemble(spec, ens)
    rows = []
    for p in range(2):
        for k in range(grid.n_steps + 1):
            for i in range(spec.n_states):
                rows.append((p, k, grid.times[k], "P", i,
                             tr.probs_P[p, k, i], spec.x_states[i]))
    fname = tmp_path / "filters.csv"
    write_filters_csv(fname, rows)
    lines = fname.read_text().strip().split("\n")
    assert lines[0] == ("path_id,step,t,measure,"
                        "state_index_or_particle_id,weight,x")
    assert len(lines) == 1 + 2 * 3 * 2
    first = lines[1].split(",")
    assert first[3] == "P"
    assert float(first[5]) == pytest.approx(0.6)
