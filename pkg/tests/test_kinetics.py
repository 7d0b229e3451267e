import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial.legendre import leggauss

import oracles
from ttplab.errors import ConfigurationError, InvalidSampleError, PositivityError, SolverError
from ttplab.fields import SCENARIO_IDS, Box, build_scenario, eval_sample
from ttplab.kinetics import (
    ENTROPY_CONST,
    QuadratureGrid,
    advance_p0,
    entropy_production,
    entropy_slope,
    gaussian_entropy,
    init_p0_state,
    integrate_p0,
    kinetic_fields,
    p0_floor,
    p0_rate,
    quadrature_grid,
    solve_initial_p0,
    write_ledger_csv,
)

ROOTED = ("uniform", "taylor-green", "manufactured-compressible")


# --- kinetic_fields -----------------------------------------------------------


def test_direct_substitution():
    sc = build_scenario("uniform", {"p": 0.2, "T": 0.3})
    kf = kinetic_fields(eval_sample(sc, [0.5] * 3, 0.0), 1.0, sc)
    assert float(kf.p1) == pytest.approx(1.5, abs=1e-15)
    assert float(kf.p1_hat) == pytest.approx(1.5, abs=1e-15)
    assert float(kf.v_th) == pytest.approx(1.7320508075688772, abs=1e-15)


def test_uniform_steady_has_no_rates(uniform):
    kf = kinetic_fields(eval_sample(uniform, [0.5] * 3, 0.0), 1.0, uniform)
    assert float(kf.A) == 0.0 and float(kf.dln_p1hat_dt) == 0.0
    assert not bool(kf.b_defined)
    assert np.all(np.isnan(kf.b))


def test_rigid_rotation_p1_and_normal(rigid):
    r = np.array([1.0, 0.0, 0.0])
    kf = kinetic_fields(eval_sample(rigid, r, 0.0), 1.0, rigid)
    assert float(kf.p1) == pytest.approx(3.0, rel=1e-15)
    np.testing.assert_allclose(kf.b, [1.0, 0.0, 0.0], atol=1e-15)

    def p1_hat(x):
        return float(kinetic_fields(eval_sample(rigid, x, 0.0), 1.0, rigid).p1_hat)

    h = 1e-5
    fd = np.array([(p1_hat(r + h * e) - p1_hat(r - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(kf.grad_p1_hat, fd, atol=1e-8)


def test_positivity_violation(rigid):
    with pytest.raises(PositivityError):
        kinetic_fields(eval_sample(rigid, [1.0, 0.0, 0.0], 0.0), -5.0, rigid)


def test_nonpositive_density_rejected(uniform):
    from dataclasses import replace

    s = eval_sample(uniform, [0.5] * 3, 0.0)
    with pytest.raises(InvalidSampleError):
        kinetic_fields(replace(s, rho=np.array(0.0)), 1.0, uniform)


@pytest.mark.parametrize("sid", ["rigid-rotation", "taylor-green", "manufactured-compressible"])
@given(frac=st.tuples(*[st.floats(0.05, 0.95)] * 3), extra=st.floats(0.1, 50.0))
def test_kinetic_invariants(sid, frac, extra):
    sc = build_scenario(sid)
    lo, hi = np.asarray(sc.domain.lo), np.asarray(sc.domain.hi)
    r = lo + (hi - lo) * np.asarray(frac)
    s = eval_sample(sc, r, sc.t_span[0])
    p0 = float(s.phi - s.p - s.n * s.T) + extra
    kf = kinetic_fields(s, p0, sc)
    assert float(kf.p1) > 0
    assert float(kf.v_th) ** 2 == pytest.approx(2 * float(kf.p1_hat), rel=1e-15)
    if kf.b_defined:
        assert np.linalg.norm(kf.b) == pytest.approx(1.0, abs=1e-15)


def test_material_log_rate_on_taylor_green(tg):
    # D ln p1_hat/Dt from the kinetic fields vs a finite difference along the fluid path
    r, t, p0 = np.array([1.2, 2.3, 0.5]), 0.4, 80.0
    kf = kinetic_fields(eval_sample(tg, r, t), p0, tg)
    h = 1e-5
    V = eval_sample(tg, r, t).V

    def ln_p1h(x, s):
        return math.log(float(kinetic_fields(eval_sample(tg, x, s), p0, tg).p1_hat))

    fd = (ln_p1h(r + h * V, t + h) - ln_p1h(r - h * V, t - h)) / (2 * h)
    assert float(kf.dln_p1hat_dt) == pytest.approx(fd, abs=1e-8)


# --- quadrature ----------------------------------------------------------------


@pytest.mark.parametrize("sid", SCENARIO_IDS)
@pytest.mark.parametrize("order", [1, 5, 16])
def test_grid_weights_sum_to_volume(sid, order):
    sc = build_scenario(sid)
    g = quadrature_grid(sc, order)
    assert g.weights.sum() == pytest.approx(sc.domain.volume, rel=1e-12)


def test_grid_collapses_constant_axes(tg, uniform):
    assert quadrature_grid(tg, 6).order == (6, 6, 1)
    assert quadrature_grid(uniform, 6).order == (1, 1, 1)


def test_bad_grid_order(tg):
    with pytest.raises(ConfigurationError):
        QuadratureGrid.box(tg.domain, (4, 4))


# --- entropy ---------------------------------------------------------------------


def test_uniform_unit_entropy_root(uniform):
    g = quadrature_grid(uniform)
    assert abs(gaussian_entropy(uniform, oracles.UNIFORM_UNIT_P0, 0.0, g)) < 1e-14
    # the oracle is an independent velocity-space quadrature
    assert oracles.uniform_entropy(oracles.UNIFORM_UNIT_P0) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("p0", [0.05, 0.3, 2.0])
def test_entropy_matches_6d_quadrature_uniform(uniform, p0):
    g = quadrature_grid(uniform)
    brute = oracles.entropy_6d(lambda x, y, z: 1.0, lambda x, y, z: p0, (0, 0, 0), (1, 1, 1), n_space=2)
    assert gaussian_entropy(uniform, p0, 0.0, g) == pytest.approx(brute, abs=1e-12)


def test_entropy_matches_6d_quadrature_nonuniform(manufactured):
    # coarse brute-force check on a box where rho and p1 vary
    p0, t = 5.0, 0.3
    box = ((0.0, -0.5, -0.5), (1.0, 0.5, 0.5))
    sub = build_scenario("manufactured-compressible", domain=Box(*box))

    def rho(x, y, z):
        return float(eval_sample(sub, [x, y, z], t).rho)

    def p1(x, y, z):
        return float(kinetic_fields(eval_sample(sub, [x, y, z], t), p0, sub).p1)

    brute = oracles.entropy_6d(rho, p1, *box, n_space=6, n_vel=8)
    g = QuadratureGrid.box(sub.domain, 6)
    assert gaussian_entropy(sub, p0, t, g) == pytest.approx(brute, rel=1e-12)


def test_doubling_p0_shift(uniform):
    g = quadrature_grid(uniform)
    s1 = gaussian_entropy(uniform, 0.4, 0.0, g)
    s2 = gaussian_entropy(uniform, 0.8, 0.0, g)
    assert s2 - s1 == pytest.approx(1.5 * math.log(2.0), rel=1e-14)
    assert s2 - s1 == pytest.approx(oracles.uniform_entropy(0.8) - oracles.uniform_entropy(0.4), rel=1e-10)


def test_entropy_grid_order_8_vs_16_uniform(uniform):
    a = gaussian_entropy(uniform, 0.3, 0.0, QuadratureGrid.box(uniform.domain, 8))
    b = gaussian_entropy(uniform, 0.3, 0.0, QuadratureGrid.box(uniform.domain, 16))
    assert abs(a - b) < 1e-8


@pytest.mark.parametrize("sid,params", [("taylor-green", {}), ("manufactured-compressible", {}),
                                        ("rigid-rotation", {"half_height": 1.0})])
def test_entropy_grid_convergence(sid, params):
    # oscillatory fields need more than 8 nodes per axis; convergence is geometric
    sc = build_scenario(sid, params)
    g32 = quadrature_grid(sc, 32)
    p0 = solve_initial_p0(sc, 0.0, g32) if sid != "rigid-rotation" else 1.0
    S = {o: gaussian_entropy(sc, p0, 0.0, quadrature_grid(sc, o)) for o in (8, 16, 24, 32)}
    err = [abs(S[o] - S[32]) for o in (8, 16, 24)]
    assert err[0] > err[1] > err[2]
    mass = g32.integrate(eval_sample(sc, g32.nodes, 0.0).rho)
    assert err[2] < 1e-8 * mass


@pytest.mark.parametrize("sid", ROOTED)
@given(a=st.floats(0.01, 10.0), b=st.floats(0.01, 10.0))
def test_entropy_strictly_increasing_in_p0(sid, a, b):
    sc = build_scenario(sid)
    g = quadrature_grid(sc, 4)
    base = p0_floor(sc, 0.0, g)
    lo, hi = sorted((base + a, base + b))
    if hi - lo < 1e-9:
        return
    assert gaussian_entropy(sc, hi, 0.0, g) > gaussian_entropy(sc, lo, 0.0, g)
    assert entropy_slope(sc, lo, 0.0, g) > 0


def test_entropy_slope_matches_difference(tg):
    g = quadrature_grid(tg, 8)
    p0, h = 60.0, 1e-4
    fd = (gaussian_entropy(tg, p0 + h, 0.0, g) - gaussian_entropy(tg, p0 - h, 0.0, g)) / (2 * h)
    assert entropy_slope(tg, p0, 0.0, g) == pytest.approx(fd, rel=1e-7)


def test_entropy_constant_uses_five_halves():
    # -int f ln f with rho != 1 fixes the coefficient of rho ln rho
    sc = build_scenario("uniform", {"rho": 3.0})
    g = quadrature_grid(sc)
    assert gaussian_entropy(sc, 0.7, 0.0, g) == pytest.approx(oracles.uniform_entropy(0.7, rho=3.0), rel=1e-12)
    assert ENTROPY_CONST == pytest.approx(1.5 * (1 + math.log(2 * math.pi)))


# --- p0 solve ----------------------------------------------------------------------


def test_solve_uniform_unit(uniform):
    p0 = solve_initial_p0(uniform, 0.0, quadrature_grid(uniform))
    assert p0 == pytest.approx(oracles.uniform_p0_root(), abs=1e-8)
    assert p0 == pytest.approx(0.0585498, abs=1e-7)


@pytest.mark.parametrize("rho,p", [(2.5, 0.0), (0.4, 0.0), (1.7, 0.3)])
def test_solve_uniform_scaled_density(rho, p):
    sc = build_scenario("uniform", {"rho": rho, "p": p})
    p0 = solve_initial_p0(sc, 0.0, quadrature_grid(sc))
    assert p0 == pytest.approx(oracles.uniform_p0_root(rho=rho, w=p), abs=1e-8)


@pytest.mark.parametrize("sid", ROOTED)
def test_solve_initial_p0_postconditions(sid):
    sc = build_scenario(sid)
    g = quadrature_grid(sc)
    p0 = solve_initial_p0(sc, 0.0, g)
    assert abs(gaussian_entropy(sc, p0, 0.0, g)) < 1e-10
    assert p0 > p0_floor(sc, 0.0, g)
    s = eval_sample(sc, g.nodes, 0.0)
    assert np.min(p0 + s.p - s.phi + s.n * s.T) > 0


def test_no_root_raises_solver_error(rigid):
    # the default rigid-rotation column is so tall that S > 0 even at the floor
    with pytest.raises(SolverError):
        solve_initial_p0(rigid, 0.0, quadrature_grid(rigid))


# --- entropy production and p0 ODE --------------------------------------------------


@pytest.mark.parametrize("sid", ["uniform", "rigid-rotation", "taylor-green"])
def test_isothermal_production_zero(sid):
    sc = build_scenario(sid)
    assert entropy_production(sc, 0.0, quadrature_grid(sc, 4)) == 0.0


def test_uniform_p0_constant(uniform):
    g = quadrature_grid(uniform)
    st0 = init_p0_state(uniform, 0.0, g)
    assert st0.dp0_dt == 0.0 and st0.stationary
    st1 = integrate_p0(st0, uniform, 1.0, 0.1, g)
    assert st1.p0 == st0.p0 and st1.t == pytest.approx(1.0)
    assert p0_rate(uniform, 0.5, st0.p0, g) == 0.0


def test_constant_h_theorem_taylor_green(tg):
    g = quadrature_grid(tg, 16)
    st0 = init_p0_state(tg, 0.0, g)
    st1 = integrate_p0(st0, tg, 1.0, 1e-2, g)
    S = np.array([row[2] for row in st1.history])
    assert np.max(np.abs(S - S[0])) < 1e-6
    assert len(st1.history) == 101


def _entropy_defect(sc, g, dt, t1=1.0):
    x, w = leggauss(20)
    produced = 0.5 * t1 * sum(wi * entropy_production(sc, 0.5 * t1 * (xi + 1), g) for xi, wi in zip(x, w))
    st0 = init_p0_state(sc, 0.0, g)
    st1 = integrate_p0(st0, sc, t1, dt, g)
    return st1.S_fM - st0.S_fM - produced, st1


def test_weak_h_theorem_rk4_order(manufactured):
    g = quadrature_grid(manufactured, 16)
    coarse, _ = _entropy_defect(manufactured, g, 0.1)
    fine, st = _entropy_defect(manufactured, g, 0.05)
    assert 16 * 0.8 < coarse / fine < 16 * 1.2
    assert all(row[3] >= 0 for row in st.history)


def test_stages_cover_step(tg, tg_state):
    g, st0 = tg_state
    st1 = advance_p0(st0, tg, 0.01, g)
    assert len(st1.stages) == 4 and st1.stages[-1].t == pytest.approx(0.01)
    assert st1.stages_for(0.0, 0.01) == st1.stages
    with pytest.raises(ConfigurationError):
        st1.stages_for(0.01, 0.01)
    with pytest.raises(ConfigurationError):
        advance_p0(st0, tg, 0.0, g)


def test_ledger_csv(tmp_path, tg, tg_state):
    g, st0 = tg_state
    st = integrate_p0(st0, tg, 0.05, 0.01, g)
    path = tmp_path / "ledger.csv"
    write_ledger_csv(st, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "p0", "S_fM", "dS_T_dt"]
    t = [float(r[0]) for r in rows[1:]]
    assert len(t) >= 6 and all(b > a for a, b in zip(t, t[1:]))


def test_branching_from_an_old_state_keeps_ledgers_apart(tg, tg_state):
    g, st0 = tg_state
    a = advance_p0(advance_p0(st0, tg, 0.01, g), tg, 0.01, g)
    b = advance_p0(st0, tg, 0.02, g)
    assert [row[0] for row in a.history] == pytest.approx([0.0, 0.01, 0.02])
    assert [row[0] for row in b.history] == pytest.approx([0.0, 0.02])
    assert len(st0.history) >= 1 and st0.history[0][0] == 0.0
