"""Tests for the value-surface solvers and the Monte Carlo dual route.

Structural checks come first: affine claims must reproduce exactly
because the difference operators annihilate affine functions of s by
construction. Convergence is then pinned against the closed-form
lognormal-call oracle (second order, Richardson ratio ~4), and every
surface gets a Feynman-Kac cross-check from an independently simulated
martingale-measure ensemble.
"""

import csv

import numpy as np
import pytest
from scipy.stats import norm

from hedgelab.errors import (
    FilterStateError, MeasureSignError, OutOfRangeError, SampleSizeError,
    StepSizeError, SurfaceError,
)
from hedgelab.filtering import FilterState, finite_prior
from hedgelab.models import (
    ClaimSpec, CoefficientSet, MarkSpace, ModelSpec, TimeGrid,
)
from hedgelab.pricing import (
    PriceGrids, ValueSurface, build_s_grid, feynman_kac_mc, probe_report,
    solve_value_surface, value_process, write_surface_csv,
    _check_monotone, _interp_extrap, _stencils,
)
from hedgelab.simulate import RngStream


# ---------------------------------------------------------------------------
# reference specs
# ---------------------------------------------------------------------------

def bs_spec():
    """x-independent lognormal market in finite-state clothing (one latent
    state), so the coupled 1-D solver is exercised on a problem with a
    closed-form answer."""
    return ModelSpec(
        "diffusion",
        CoefficientSet(mu1=0.05, sigma1=0.2),
        x0=0.0, s0=100.0,
        x_states=np.array([0.0]),
        x_generator=np.zeros((1, 1)))


def bs_xgrid_spec(rho=0.0, sigma1=0.2):
    """Same market, continuous latent factor: exercises the 2-D solver."""
    return ModelSpec(
        "diffusion",
        CoefficientSet(mu0=0.0, sigma0=0.3, mu1=0.0, sigma1=sigma1,
                       rho=rho),
        x0=0.0, s0=100.0)


def jump_spec(eta=(3.0, 2.0)):
    """Two-state pure-jump model with swapped jump sizes; both states see
    atoms near -7% and +10% so the tilt stays a measure."""
    return ModelSpec(
        "pure_jump",
        CoefficientSet(K1=["0.1 - 0.17*x", "-0.07 + 0.17*x"]),
        marks=MarkSpace(np.array([0.0, 1.0]), np.asarray(eta, float)),
        x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.5, 0.5], [0.7, -0.7]]),
        x0=0.0, s0=1.0,
        x0_prior=np.array([0.6, 0.4]))


def jumpdiff_spec():
    """Jump-diffusion with a state-dependent drift and one common mark."""
    return ModelSpec(
        "jump_diffusion",
        CoefficientSet(mu1="0.02 + 0.03*x", sigma1=0.2,
                       K1=["0.08 - 0.05*x"]),
        marks=MarkSpace(np.array([0.0]), np.array([1.5])),
        x_states=np.array([0.0, 1.0]),
        x_generator=np.array([[-0.4, 0.4], [0.6, -0.6]]),
        x0=0.0, s0=100.0,
        x0_prior=np.array([0.5, 0.5]))


BS_EXACT = 100.0 * (norm.cdf(0.1) - norm.cdf(-0.1))   # 7.965567...
BS_SLOPE = norm.cdf(0.1)                              # 0.5398278...


# ---------------------------------------------------------------------------
# grids and stencils
# ---------------------------------------------------------------------------

def test_s_grid_shape():
    spec = bs_spec()
    s = build_s_grid(spec, PriceGrids(TimeGrid(1.0, 64), n_s=241))
    assert s.size == 241
    assert np.all(np.diff(s) > 0)
    # log-spaced and centered exactly on s0
    assert s[s.size // 2] == pytest.approx(100.0, abs=1e-12)
    ratios = s[1:] / s[:-1]
    assert np.allclose(ratios, ratios[0], rtol=1e-10)
    # even request is bumped to odd so the center stays on s0
    s2 = build_s_grid(spec, PriceGrids(TimeGrid(1.0, 64), n_s=240))
    assert s2.size == 241


def test_stencils_exact_on_quadratics():
    rng = np.random.default_rng(5)
    s = np.sort(rng.uniform(1.0, 9.0, 17))
    d1, d2 = _stencils(s)
    f = 3.0 - 2.0 * s + 0.7 * s ** 2

    def apply_bands(b, v):
        out = b[1] * v
        out[:-1] += b[2, :-1] * v[1:]
        out[1:] += b[0, 1:] * v[:-1]
        return out

    got1 = apply_bands(d1, f)[1:-1]
    got2 = apply_bands(d2, f)[1:-1]
    assert np.allclose(got1, (-2.0 + 1.4 * s)[1:-1], atol=1e-10)
    assert np.allclose(got2, 1.4, atol=1e-10)
    # boundary rows: one-sided first derivative, exact for affine data
    aff = 0.5 + 2.0 * s
    gota = apply_bands(d1, aff)
    assert gota[0] == pytest.approx(2.0, abs=1e-12)
    assert gota[-1] == pytest.approx(2.0, abs=1e-12)
    # second derivative is switched off at the boundary rows
    assert np.all(d2[:, 0] == 0.0) and np.all(d2[:, -1] == 0.0)


def test_interp_extrap_affine_exact():
    xg = np.array([1.0, 2.0, 4.0, 7.0])
    fg = 3.0 * xg - 1.0
    xq = np.array([0.2, 1.5, 6.0, 9.5])
    assert np.allclose(_interp_extrap(xq, xg, fg), 3.0 * xq - 1.0,
                       atol=1e-12)


# ---------------------------------------------------------------------------
# exact reproduction of affine claims
# ---------------------------------------------------------------------------

def test_constant_claim_exact_jump():
    surf = solve_value_surface(jump_spec(), ClaimSpec.constant(3.5),
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    assert np.max(np.abs(surf.g - 3.5)) < 1e-12


def test_identity_claim_exact_jump():
    surf = solve_value_surface(jump_spec(), ClaimSpec.identity(),
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    gap = np.abs(surf.g - surf.s_values[None, None, :])
    assert np.max(gap / surf.s_values[None, None, :]) < 1e-10
    # slope sheets of the identity are 1 everywhere
    assert np.max(np.abs(surf.dg_ds - 1.0)) < 1e-8


def test_identity_claim_exact_jumpdiff():
    surf = solve_value_surface(jumpdiff_spec(), ClaimSpec.identity(),
                               PriceGrids(TimeGrid(1.0, 48), n_s=81))
    gap = np.abs(surf.g - surf.s_values[None, None, :])
    assert np.max(gap / surf.s_values[None, None, :]) < 1e-10


def test_affine_claims_exact_adi():
    grids = PriceGrids(TimeGrid(0.5, 16), n_s=61, n_x=21)
    spec = bs_xgrid_spec(rho=-0.5, sigma1="0.25 + 0.05*x")
    surfc = solve_value_surface(spec, ClaimSpec.constant(2.0), grids)
    assert np.max(np.abs(surfc.g - 2.0)) < 1e-12
    surfi = solve_value_surface(spec, ClaimSpec.identity(), grids)
    gap = np.abs(surfi.g - surfi.s_values[None, None, :])
    assert np.max(gap / surfi.s_values[None, None, :]) < 1e-10


def test_put_call_parity_exact():
    # zero rates and martingale pricing make call - put = s - K; the
    # difference of the two surfaces is an affine claim, so the solver
    # must reproduce it to machine precision, kink or not
    grids = PriceGrids(TimeGrid(1.0, 64), n_s=161)
    spec = bs_spec()
    call = solve_value_surface(spec, ClaimSpec.call(100.0), grids)
    put = solve_value_surface(spec, ClaimSpec.put(100.0), grids)
    diff = call.g - put.g
    target = call.s_values[None, None, :] - 100.0
    assert np.max(np.abs(diff - target)) < 1e-9 * 100.0


def test_terminal_row_is_payoff():
    claim = ClaimSpec.call(1.0)
    surf = solve_value_surface(jump_spec(), claim,
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    pay = claim.payoff(surf.s_values)
    assert np.array_equal(surf.g[0, -1], pay)
    assert np.array_equal(surf.g[1, -1], pay)


# ---------------------------------------------------------------------------
# lognormal call oracle
# ---------------------------------------------------------------------------

def test_bs_value_and_slope():
    surf = solve_value_surface(bs_spec(), ClaimSpec.call(100.0),
                               PriceGrids(TimeGrid(1.0, 128), n_s=401))
    assert surf.value(0.0, 0.0, 100.0) == pytest.approx(BS_EXACT, abs=5e-3)
    assert surf.slope(0.0, 0.0, 100.0) == pytest.approx(BS_SLOPE, abs=5e-3)


def test_bs_richardson_second_order():
    vals = []
    for n_s, n_t in ((101, 32), (201, 64), (401, 128)):
        surf = solve_value_surface(bs_spec(), ClaimSpec.call(100.0),
                                   PriceGrids(TimeGrid(1.0, n_t), n_s=n_s))
        vals.append(surf.value(0.0, 0.0, 100.0))
    ratio = (vals[0] - vals[1]) / (vals[1] - vals[2])
    # successive-difference ratio ~4 for a second-order scheme under
    # simultaneous halving of ds and dt (measured 4.02)
    assert 2.5 < ratio < 6.0


def test_adi_x_independent_matches_bs():
    surf = solve_value_surface(bs_xgrid_spec(), ClaimSpec.call(100.0),
                               PriceGrids(TimeGrid(1.0, 64), n_s=241,
                                          n_x=41))
    assert surf.mode == "xgrid"
    # every x sheet prices the same x-independent claim
    for xv in (surf.x_values[0], 0.0, surf.x_values[-1]):
        assert surf.value(0.0, float(xv), 100.0) == pytest.approx(
            BS_EXACT, abs=5e-3)


# ---------------------------------------------------------------------------
# two-factor solver vs the Monte Carlo dual route
# ---------------------------------------------------------------------------

def test_adi_stochastic_vol_dual_route():
    spec = bs_xgrid_spec(rho=-0.5, sigma1="0.25 + 0.05*x")
    grids = PriceGrids(TimeGrid(1.0, 64), n_s=241, n_x=61)
    surf = solve_value_surface(spec, ClaimSpec.call(100.0), grids)
    pde = surf.value(0.0, 0.0, 100.0)
    mc, se = feynman_kac_mc(spec, ClaimSpec.call(100.0), 0.0, 0.0, 100.0,
                            40_000, RngStream(99), grids.time)
    assert abs(pde - mc) < 4.0 * se + 5e-3 * spec.s0


def test_adi_rejects_degenerate_vol_rows():
    # sigma1 ~ 0.02 at the x-grid edge: the payoff kink never diffuses on
    # those rows and the surface comes out visibly non-monotone; the
    # guard must refuse to return it
    spec = bs_xgrid_spec(rho=-0.5, sigma1="0.2 + 0.1*x")
    with pytest.raises(SurfaceError, match="monotonicity"):
        solve_value_surface(spec, ClaimSpec.call(100.0),
                            PriceGrids(TimeGrid(1.0, 64), n_s=241, n_x=61))


def test_adi_rejects_jump_models():
    with pytest.raises(SurfaceError, match="finite-state"):
        solve_value_surface(
            ModelSpec("pure_jump", CoefficientSet(K1=[0.1, -0.07]),
                      marks=MarkSpace(np.array([0.0, 1.0]),
                                      np.array([3.0, 2.0])),
                      x0=0.0, s0=1.0),
            ClaimSpec.call(1.0), PriceGrids(TimeGrid(1.0, 32), n_s=61))


# ---------------------------------------------------------------------------
# guards
# ---------------------------------------------------------------------------

def test_monotone_guard_direct():
    g = np.linspace(0.0, 5.0, 11)[None, None, :].copy()
    _check_monotone(ClaimSpec.call(1.0), g, 5.0)     # clean: no raise
    g2 = g.copy()
    g2[0, 0, 4] = g2[0, 0, 5] + 1e-3                 # visible dip
    with pytest.raises(SurfaceError, match="monotonicity"):
        _check_monotone(ClaimSpec.call(1.0), g2, 5.0)
    # a put runs downhill, so the increasing ramp is the violation
    with pytest.raises(SurfaceError):
        _check_monotone(ClaimSpec.put(1.0), g, 5.0)
    # constants have no direction to check
    _check_monotone(ClaimSpec.constant(2.0), g2, 5.0)


def test_cfl_guard():
    big = jump_spec(eta=(20.0, 15.0))
    with pytest.raises(StepSizeError, match="unstable"):
        solve_value_surface(big, ClaimSpec.call(1.0),
                            PriceGrids(TimeGrid(1.0, 16), n_s=61))


def test_tilt_must_stay_a_measure():
    # all-positive jump sizes with no Brownian part: no equivalent
    # martingale tilt exists, the candidate intensities go negative
    bad = ModelSpec(
        "pure_jump", CoefficientSet(K1=[0.5, 0.01]),
        marks=MarkSpace(np.array([0.0, 1.0]), np.array([1.0, 50.0])),
        x0=0.0, s0=1.0,
        x_states=np.array([0.0]), x_generator=np.zeros((1, 1)))
    with pytest.raises(MeasureSignError):
        solve_value_surface(bad, ClaimSpec.call(1.0),
                            PriceGrids(TimeGrid(1.0, 400), n_s=61))


def test_surface_out_of_range():
    surf = solve_value_surface(jump_spec(), ClaimSpec.identity(),
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    with pytest.raises(OutOfRangeError, match="s="):
        surf.value(0.0, 0.0, 1e9)
    with pytest.raises(OutOfRangeError, match="t="):
        surf.value(2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Feynman-Kac oracle
# ---------------------------------------------------------------------------

def test_fk_constant_claim():
    est, se = feynman_kac_mc(jump_spec(), ClaimSpec.constant(2.5), 0.0,
                             None, 1.0, 200, RngStream(1),
                             TimeGrid(1.0, 16))
    assert est == pytest.approx(2.5, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_fk_identity_is_martingale():
    est, se = feynman_kac_mc(jump_spec(), ClaimSpec.identity(), 0.0, None,
                             1.0, 20_000, RngStream(2), TimeGrid(1.0, 32))
    assert abs(est - 1.0) < 4.0 * se


def test_fk_at_horizon_returns_payoff():
    est, se = feynman_kac_mc(jump_spec(), ClaimSpec.call(0.8), 1.0, 0.0,
                             1.1, 50, RngStream(3), TimeGrid(1.0, 16))
    assert est == pytest.approx(0.3, abs=1e-12)
    assert se == 0.0


def test_fk_guards():
    with pytest.raises(SampleSizeError):
        feynman_kac_mc(jump_spec(), ClaimSpec.identity(), 0.0, None, 1.0,
                       0, RngStream(1), TimeGrid(1.0, 16))
    with pytest.raises(OutOfRangeError):
        feynman_kac_mc(jump_spec(), ClaimSpec.identity(), 1.5, None, 1.0,
                       100, RngStream(1), TimeGrid(1.0, 16))


def test_fk_dual_route_jump_surface():
    spec = jump_spec()
    claim = ClaimSpec.call(1.0)
    grids = PriceGrids(TimeGrid(1.0, 64), n_s=161)
    surf = solve_value_surface(spec, claim, grids)
    for i, xv in enumerate(spec.x_states):
        mc, se = feynman_kac_mc(spec, claim, 0.0, float(xv), 1.0, 30_000,
                                RngStream(7 + i), grids.time)
        pde = surf.value(0.0, float(xv), 1.0)
        assert abs(pde - mc) < 4.0 * se + 5e-3 * spec.s0


# ---------------------------------------------------------------------------
# value process and probes
# ---------------------------------------------------------------------------

def test_value_process_mixes_sheets():
    spec = jump_spec()
    surf = solve_value_surface(spec, ClaimSpec.call(1.0),
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    state = FilterState("finite", "Pstar", spec.x_states,
                        np.array([0.3, 0.7]))
    got = value_process(surf, state, 0.5, 1.02)
    want = 0.3 * surf.value(0.5, 0.0, 1.02) + 0.7 * surf.value(0.5, 1.0,
                                                               1.02)
    assert got == pytest.approx(want, abs=1e-14)


def test_value_process_terminal_is_payoff():
    spec = jump_spec()
    claim = ClaimSpec.call(1.0)
    surf = solve_value_surface(spec, claim,
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    s_node = float(surf.s_values[50])
    for w in ([1.0, 0.0], [0.25, 0.75]):
        state = FilterState("finite", "Pstar", spec.x_states,
                            np.asarray(w))
        assert value_process(surf, state, 1.0, s_node) == pytest.approx(
            float(claim.payoff(s_node)), abs=1e-12)


def test_value_process_checks_filter():
    spec = jump_spec()
    surf = solve_value_surface(spec, ClaimSpec.identity(),
                               PriceGrids(TimeGrid(1.0, 32), n_s=81))
    state = finite_prior(spec, "Pstar")
    state.weights = np.array([0.5, 0.9])            # corrupted in place
    with pytest.raises(FilterStateError):
        value_process(surf, state, 0.0, 1.0)


def test_probe_report_jump_bundle():
    spec = jump_spec()
    claim = ClaimSpec.call(1.0)
    grids = PriceGrids(TimeGrid(1.0, 64), n_s=161)
    surf = solve_value_surface(spec, claim, grids)
    rep = probe_report(spec, claim, surf, grids, RngStream(11),
                       n_probes=8, n_paths=2000)
    assert rep["all_ok"], rep
    assert rep["n_probes"] == 8
    assert len(rep["probes"]) == 8
    for p in rep["probes"]:
        assert p["se"] > 0.0
        assert surf.s_values[0] < p["s"] < surf.s_values[-1]


# ---------------------------------------------------------------------------
# dump format
# ---------------------------------------------------------------------------

def test_write_surface_csv(tmp_path):
    spec = jump_spec()
    surf = solve_value_surface(spec, ClaimSpec.identity(),
                               PriceGrids(TimeGrid(0.5, 4), n_s=21))
    fname = tmp_path / "surface.csv"
    write_surface_csv(fname, surf)
    with open(fname) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["state", "t", "s", "g", "dg_ds"]
    assert len(rows) == 1 + 2 * 5 * 21
    state, t, s, gval, slope = rows[1]
    assert state == "0" and float(t) == 0.0
    assert float(gval) == pytest.approx(float(s), rel=1e-9)
    assert float(slope) == pytest.approx(1.0, abs=1e-6)
