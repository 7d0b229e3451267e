import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ttplab.errors import ConfigurationError, DomainError, InvalidSampleError, SingularityError
from ttplab.fields import (
    FLUID_SAMPLE_FIELDS,
    SCENARIO_IDS,
    AlphaHook,
    Box,
    build_scenario,
    eval_sample,
    fd_check,
    heat_source,
    load_scenario,
    ns_acceleration,
    residual_sweep,
    residuals,
    scenario_from_dict,
    scenario_to_dict,
    spacetime_lattice,
    viscous_dissipation,
    vorticity,
)
from ttplab.kinetics import QuadratureGrid, entropy_production, entropy_production_density, quadrature_grid

EXACT = ("uniform", "rigid-rotation", "taylor-green")


def unit_fraction(scenario, frac):
    lo, hi = np.asarray(scenario.domain.lo), np.asarray(scenario.domain.hi)
    return lo + (hi - lo) * np.asarray(frac)


fractions = st.tuples(*[st.floats(0.05, 0.95)] * 3)


# --- eval_sample ------------------------------------------------------------


def test_uniform_flow_has_no_gradients():
    sc = build_scenario("uniform", {"p": 0.2})
    s = eval_sample(sc, [0.3, 0.4, 0.5], 1.0)
    np.testing.assert_array_equal(s.V, [1.0, 0.0, 0.0])
    assert float(s.p) == 0.2
    np.testing.assert_array_equal(s.grad_V, np.zeros((3, 3)))
    assert float(s.div_V) == 0.0


def test_rigid_rotation_velocity(rigid):
    s = eval_sample(rigid, [1.0, 0.0, 0.0], 0.0)
    np.testing.assert_allclose(s.V, [0.0, 2.0, 0.0], atol=0)
    assert float(s.div_V) == 0.0


@pytest.mark.parametrize("t", [0.0, 0.5, 3.0, 40.0])
def test_taylor_green_matches_closed_form_decay(tg, t):
    r = np.array([[0.3, 1.1, 0.2], [2.0, 5.0, 0.9], [4.4, 0.7, 0.5]])
    got = eval_sample(tg, r, t).V
    nu = tg.mu / tg.param("rho0")
    np.testing.assert_allclose(got, oracles.taylor_green_velocity(r, t, nu=nu), rtol=1e-14, atol=1e-15)
    ratio = eval_sample(tg, r, t).V[:, :2] / eval_sample(tg, r, 0.0).V[:, :2]
    np.testing.assert_allclose(ratio, np.exp(-2 * nu * t), rtol=1e-13)


def test_batch_shape_and_fields(tg):
    r = np.full((4, 2, 3), 0.5)
    s = eval_sample(tg, r, 0.1)
    assert s.rho.shape == (4, 2)
    assert s.grad_V.shape == (4, 2, 3, 3)
    assert s.hess_p1_part.shape == (4, 2, 3, 3)
    assert "hess_p1_part" in FLUID_SAMPLE_FIELDS


def test_out_of_domain_raises(tg):
    with pytest.raises(DomainError):
        eval_sample(tg, [100.0, 0.0, 0.0], 0.0)
    with pytest.raises(DomainError):
        eval_sample(tg, [1.0, 1.0, 0.5], -1.0)


def test_wrong_alpha_arity(tg):
    with pytest.raises(ConfigurationError):
        eval_sample(tg, [1.0, 1.0, 0.5], 0.0, alpha=[0.1])


@pytest.mark.parametrize("sid", SCENARIO_IDS)
def test_potential_vanishes_at_reference_point(sid):
    sc = build_scenario(sid)
    assert float(eval_sample(sc, np.array(sc.reference_point), sc.t_span[0]).phi) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("sid", SCENARIO_IDS)
@given(frac=fractions)
def test_density_positive(sid, frac):
    sc = build_scenario(sid)
    assert float(eval_sample(sc, unit_fraction(sc, frac), sc.t_span[0]).rho) > 0


# --- vorticity --------------------------------------------------------------


def test_vorticity_rigid(rigid):
    xi = vorticity(eval_sample(rigid, [0.3, -0.7, 1.0], 0.0))
    np.testing.assert_allclose(xi, [0.0, 0.0, 4.0], atol=1e-15)


def test_vorticity_uniform(uniform):
    np.testing.assert_array_equal(vorticity(eval_sample(uniform, [0.5, 0.5, 0.5], 0.0)), np.zeros(3))


@pytest.mark.parametrize("sid", SCENARIO_IDS)
@given(frac=fractions)
def test_vorticity_matches_fd_curl(sid, frac):
    sc = build_scenario(sid)
    t = sc.t_span[0] + 0.1
    r = unit_fraction(sc, frac)
    fd = oracles.fd_curl(lambda x: eval_sample(sc, x, t).V, r, h=1e-5 * sc.domain.scale)
    np.testing.assert_allclose(vorticity(eval_sample(sc, r, t)), fd, atol=1e-6)


# --- forces and heat ---------------------------------------------------------


def test_ns_acceleration_uniform_zero(uniform):
    np.testing.assert_array_equal(ns_acceleration(eval_sample(uniform, [0.5] * 3, 0.0), uniform), np.zeros(3))


def test_ns_acceleration_rigid_centripetal(rigid):
    r = np.array([0.8, -0.3, 2.0])
    F = ns_acceleration(eval_sample(rigid, r, 0.0), rigid)
    np.testing.assert_allclose(F, [-4.0 * 0.8, 4.0 * 0.3, 0.0], rtol=1e-14, atol=1e-15)


def test_ns_acceleration_taylor_green_is_material_derivative(tg):
    pts, _ = spacetime_lattice(tg, 4, 1)
    s = eval_sample(tg, pts, 0.7)
    DV = s.dt_V + np.einsum("...i,...ij->...j", s.V, s.grad_V)
    np.testing.assert_allclose(ns_acceleration(s, tg), DV, atol=1e-10)


def test_ns_acceleration_rejects_nonpositive_rho(uniform):
    s = eval_sample(uniform, [0.5] * 3, 0.0)
    with pytest.raises(InvalidSampleError):
        ns_acceleration(replace(s, rho=np.array(-1.0)), uniform)


def _shear_sample(gamma, T=2.0, n_points=1):
    sc = build_scenario("uniform", {"mu": 0.3, "c_p": 2.5, "T": T, "Vx": 0.0})
    grid = QuadratureGrid.box(sc.domain, 3)
    s = eval_sample(sc, grid.nodes, 0.0)
    G = np.zeros(s.grad_V.shape)
    G[..., 1, 0] = gamma  # dV_x/dy
    V = np.zeros(s.V.shape)
    V[..., 0] = gamma * grid.nodes[..., 1]
    return sc, grid, replace(s, V=V, grad_V=G, q_ext=np.zeros(s.rho.shape))


@pytest.mark.parametrize("gamma", [0.5, 1.0, 3.0])
def test_pure_shear_heat_source(gamma):
    sc, _, s = _shear_sample(gamma)
    expected = oracles.pure_shear_heat_source(sc.mu, gamma, 1.0, sc.c_p)
    np.testing.assert_allclose(heat_source(s, sc), expected, rtol=1e-14)
    np.testing.assert_allclose(viscous_dissipation(s, sc), sc.mu * gamma**2, rtol=1e-14)


@pytest.mark.parametrize("gamma", [0.5, 2.0])
def test_pure_shear_entropy_production(gamma):
    sc, grid, s = _shear_sample(gamma)
    got = grid.integrate(entropy_production_density(s, sc))
    assert got == pytest.approx(oracles.pure_shear_entropy_production(sc.mu, gamma, 2.0, sc.domain.volume), rel=1e-13)


def test_heat_source_static_fields_zero():
    sc = build_scenario("uniform", {"Vx": 0.0, "T": 1.5})
    assert float(heat_source(eval_sample(sc, [0.2, 0.4, 0.6], 0.0), sc)) == 0.0


@pytest.mark.parametrize("sid", EXACT)
def test_isothermal_heat_source_zero(sid):
    # the isothermal condition forces K to vanish identically
    sc = build_scenario(sid)
    pts, times = spacetime_lattice(sc, 4, 3)
    for t in times:
        assert np.max(np.abs(heat_source(eval_sample(sc, pts, float(t)), sc))) < 1e-12


def test_heat_source_singular_denominator():
    sc = build_scenario("uniform", {"c_p": 1.0, "alpha_coef": 1.0, "p": 1.0})
    with pytest.raises(SingularityError):
        heat_source(eval_sample(sc, [0.5] * 3, 0.0), sc)


def test_rigid_rotation_entropy_production_zero(rigid):
    # isentropic fluid: no thermodynamic entropy production
    assert entropy_production(rigid, 0.0, quadrature_grid(rigid, 6)) == 0.0


def test_manufactured_entropy_production_nonnegative(manufactured):
    g = quadrature_grid(manufactured, 6)
    for t in (0.0, 2.5, 10.0):
        assert entropy_production(manufactured, t, g) >= 0.0


# --- residuals and finite differences --------------------------------------------


def test_uniform_residuals_exactly_zero(uniform):
    res = residuals(uniform, [[0.1, 0.2, 0.3], [0.9, 0.9, 0.9]], 3.0)
    assert res.max_norm() == 0.0


@pytest.mark.parametrize("sid,tol", [("uniform", 1e-10), ("rigid-rotation", 1e-10), ("taylor-green", 1e-10),
                                     ("manufactured-compressible", 1e-8)])
def test_residual_sweep(sid, tol):
    worst = residual_sweep(build_scenario(sid), 5, 5)
    assert set(worst) == {"continuity", "momentum", "fourier"}
    assert max(worst.values()) < tol


def test_spacetime_lattice_shape(tg):
    pts, times = spacetime_lattice(tg, 5, 5)
    assert pts.shape == (125, 3)
    assert times[0] == tg.t_span[0] and times[-1] == tg.t_span[1]


def test_fd_check_taylor_green(tg):
    assert fd_check(tg, [1.0, 2.0, 0.5], 0.3, 1e-4) < 1e-6


@pytest.mark.parametrize("h", [1e-1, 1e-3])
def test_fd_check_uniform_exact(uniform, h):
    assert fd_check(uniform, [0.5, 0.5, 0.5], 1.0, h) == 0.0


@pytest.mark.parametrize("sid", ["taylor-green", "manufactured-compressible"])
def test_fd_check_second_order(sid):
    sc = build_scenario(sid)
    r = unit_fraction(sc, [0.37, 0.41, 0.63])
    coarse, fine = fd_check(sc, r, 1.0, 2e-2), fd_check(sc, r, 1.0, 1e-2)
    assert 3.2 < coarse / fine < 4.8


def test_fd_check_detail_and_bad_step(tg):
    worst, report = fd_check(tg, [1.0, 2.0, 0.5], 0.3, 1e-4, detail=True)
    assert worst == max(report.values())
    assert {"grad_V", "dt_q", "lap_V", "hess_s"} <= set(report)
    with pytest.raises(ConfigurationError):
        fd_check(tg, [1.0, 2.0, 0.5], 0.3, 0.0)


def test_fd_stencil_outside_domain(tg):
    with pytest.raises(DomainError):
        fd_check(tg, [0.0, 1.0, 0.5], 0.3, 1e-2)


# --- scenario construction ----------------------------------------------------


def test_scenario_json_roundtrip(tmp_path):
    doc = {"id": "rigid-rotation", "params": {"omega": 1.5}, "domain": {"min": [-1, -1, -1], "max": [1, 1, 1]},
           "t_span": [0, 5], "alpha_hooks": [{"param": "omega", "amplitude": 0.1}]}
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(doc))
    sc = load_scenario(path)
    assert sc.param("omega") == 1.5
    assert scenario_to_dict(scenario_from_dict(scenario_to_dict(sc))) == scenario_to_dict(sc)


@pytest.mark.parametrize(
    "doc",
    [
        {"id": "nope"},
        {"params": {}},
        {"id": "uniform", "params": {"bogus": 1.0}},
        {"id": "uniform", "extra": 1},
        {"id": "uniform", "t_span": [1.0, 0.0]},
        {"id": "uniform", "domain": {"min": [0, 0, 0], "max": [0, 1, 1]}},
        {"id": "uniform", "alpha_hooks": [{"param": "mu", "amplitude": 0.1}]},
        {"id": "uniform", "alpha_hooks": [{"param": "rho", "amplitude": 0.1, "mode": "weird"}]},
        {"id": "uniform", "params": {"mu": -1.0}},
        {"id": "taylor-green", "params": {"p_ref": 0.0}},
    ],
)
def test_bad_scenario_documents(doc):
    with pytest.raises(ConfigurationError):
        scenario_from_dict(doc)


def test_alpha_hooks_relative_and_absolute():
    sc = build_scenario("rigid-rotation", alpha_hooks=[AlphaHook("omega", 0.1), AlphaHook("rho0", 0.5, "absolute")])
    s = eval_sample(sc, [1.0, 0.0, 0.0], 0.0, alpha=[1.0, 2.0])
    np.testing.assert_allclose(s.V, [0.0, 2.2, 0.0], rtol=1e-15)
    assert float(s.rho) == pytest.approx(2.0)
    bound = sc.at_alpha([1.0, 2.0])
    np.testing.assert_array_equal(eval_sample(bound, [1.0, 0.0, 0.0], 0.0).V, s.V)
    with pytest.raises(ConfigurationError):
        sc.at_alpha([1.0])


def test_alpha_hook_keeps_residuals_zero():
    sc = build_scenario("taylor-green", alpha_hooks=[AlphaHook("U0", 0.2)])
    pts, _ = spacetime_lattice(sc, 3, 1)
    for a in (-1.0, 0.5):
        assert residuals(sc, pts, 0.4, alpha=[a]).max_norm() < 1e-10


def test_box_properties():
    b = Box((0, 0, 0), (1, 2, 3))
    assert b.volume == 6.0 and b.scale == 3.0
    assert b.contains([[0.5, 0.5, 0.5], [2, 0, 0]]).tolist() == [True, False]
    assert Box((0.1, 0.1, 0.1), (0.9, 1, 1)).issubset(b)
    with pytest.raises(ConfigurationError):
        Box((0, 0), (1, 1))
