import json
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ttplab.errors import ConfigurationError, InsufficientSamplesError, InvalidSampleError
from ttplab.fields import Box, eval_sample
from ttplab.kinetics import init_p0_state, kinetic_fields, quadrature_grid
from ttplab.ensemble import (
    BLOCK,
    EnsembleConfig,
    beta_cdf,
    beta_quantile,
    block_uniforms,
    check_normalization,
    estimate_moments,
    evolve_ensemble,
    f1m_density,
    f1m_normalization,
    hre_variance_check,
    proposal_density,
    sample_batch,
    sample_ttp,
)
from ttplab.ttp import LEFT_DOMAIN, TTPBatch, TTPState

RIGID_POINTS = np.array([[1.0, 0.0, 0.0], [0.3, -0.8, 0.2], [-1.2, 0.5, -0.4], [0.1, 1.4, 0.0], [-0.6, -0.6, 0.6]])


# --- the conditional KDF ----------------------------------------------------------


@pytest.mark.parametrize("rho,v", [(1.0, 1.0), (100.0, 0.3), (0.01, 7.0)])
def test_f1m_normalization_matches_symbolic_mass(rho, v):
    mom = oracles.f1m_symbolic_moments()
    u_, v_, rho_ = mom["symbols"]
    assert float(mom["mass"].subs({rho_: rho, v_: v})) == pytest.approx(rho, rel=1e-15)
    assert f1m_normalization(rho, v) == pytest.approx(rho, rel=1e-10)


def test_symbolic_second_moment_is_pressure():
    mom = oracles.f1m_symbolic_moments()
    u_, v_, rho_ = mom["symbols"]
    # rho v^2 / 2 is p1 when v^2 = 2 p1 / rho
    assert sp.simplify(mom["u2_over_3"] - rho_ * v_**2 / 2) == 0
    assert mom["ux"] == 0


@pytest.mark.parametrize("sid", ["rigid-rotation", "taylor-green", "manufactured-compressible"])
def test_check_normalization_on_scenarios(sid, request):
    sc = {"rigid-rotation": "rigid", "taylor-green": "tg", "manufactured-compressible": "manufactured"}[sid]
    sc = request.getfixturevalue(sc)
    p0 = 1.0 if sid == "rigid-rotation" else 100.0
    r = np.asarray(sc.domain.lo) + 0.37 * (np.asarray(sc.domain.hi) - np.asarray(sc.domain.lo))
    r[2] = 0.1
    rho = float(eval_sample(sc, r, 0.0).rho)
    assert check_normalization(sc, r, 0.0, p0) == pytest.approx(rho, rel=1e-10)


@given(u=st.floats(0.0, 10.0), v=st.floats(0.1, 5.0))
def test_proposal_is_f1m_over_rho(u, v):
    assert proposal_density(u, v) == pytest.approx(f1m_density(u, 1.0, v), rel=1e-12)


@given(q=st.floats(1e-9, 1 - 1e-9))
def test_beta_quantile_inverts_cdf(q):
    assert float(beta_cdf(beta_quantile(q))) == pytest.approx(q, abs=1e-12)


def test_beta_sample_moments_match_symbolic():
    ref = oracles.beta_moments_symbolic()
    beta = beta_quantile(block_uniforms(7, 1, 200_000, 1)[:, 0])
    for k in (1, 2, 4):
        x = beta**k
        se = x.std(ddof=1) / math.sqrt(len(x))
        assert abs(x.mean() - ref[k]) < 5 * se


# --- sampling ---------------------------------------------------------------------


def test_block_uniforms_do_not_depend_on_total_count():
    a = block_uniforms(3, 1, 10, 2)
    b = block_uniforms(3, 1, BLOCK + 10, 2)
    np.testing.assert_array_equal(a, b[:10])
    assert not np.array_equal(b[:10], b[BLOCK:])


def test_sample_ttp_is_tangent_and_reproducible(rigid):
    r = [0.8, 0.4, 0.0]
    b = kinetic_fields(eval_sample(rigid, r, 0.0), 1.0, rigid).b
    s1 = sample_ttp(rigid, r, 0.0, 1.0, np.random.default_rng(4))
    s2 = sample_ttp(rigid, r, 0.0, 1.0, np.random.default_rng(4))
    assert abs(np.dot(s1.n, b)) < 1e-15
    assert np.linalg.norm(s1.n) == pytest.approx(1.0, abs=1e-15)
    assert s1.beta == s2.beta and np.array_equal(s1.n, s2.n)


def test_sampling_needs_defined_gradient(uniform):
    with pytest.raises(InvalidSampleError):
        sample_ttp(uniform, [0.5] * 3, 0.0, 1.0, np.random.default_rng(0))
    with pytest.raises(InvalidSampleError):
        sample_batch(uniform, [[0.5] * 3], 10, 0.0, 1.0, 0)


def test_sample_batch_azimuth_averages_out(rigid):
    batch, tags = sample_batch(rigid, RIGID_POINTS[:1], 50_000, 0.0, 1.0, seed=1)
    b = kinetic_fields(eval_sample(rigid, RIGID_POINTS[0], 0.0), 1.0, rigid).b
    assert np.max(np.abs(batch.n @ b)) < 1e-15
    mean_n = batch.n.mean(axis=0)
    se = batch.n.std(axis=0, ddof=1) / math.sqrt(len(batch))
    assert np.all(np.abs(mean_n) < 5 * se + 1e-15)
    assert np.all(tags == 0)


def test_sample_batch_is_seed_deterministic(rigid):
    a, _ = sample_batch(rigid, RIGID_POINTS, 100, 0.0, 1.0, seed=12)
    b, _ = sample_batch(rigid, RIGID_POINTS, 100, 0.0, 1.0, seed=12)
    c, _ = sample_batch(rigid, RIGID_POINTS, 100, 0.0, 1.0, seed=13)
    assert a.n.tobytes() == b.n.tobytes() and a.beta.tobytes() == b.beta.tobytes()
    assert not np.array_equal(a.beta, c.beta)


# --- moments ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def rigid_moments(rigid):
    out = []
    for k, p in enumerate(RIGID_POINTS):
        batch, _ = sample_batch(rigid, p, 100_000, 0.0, 1.0, seed=20 + k)
        out.append((p, estimate_moments(batch, rigid, 0.0, 1.0)))
    return out


def test_correspondence_at_rigid_points(rigid, rigid_moments):
    for p, m in rigid_moments:
        s = eval_sample(rigid, p, 0.0)
        kf = kinetic_fields(s, 1.0, rigid)
        assert m.rho_hat == pytest.approx(float(s.rho), rel=1e-14)
        assert np.all(np.abs(m.V_hat - s.V) <= 5 * m.stderr["V"])
        assert abs(m.p1_hat - float(kf.p1)) <= 5 * m.stderr["p1"]


def test_stderr_scales_with_inverse_sqrt_n(rigid):
    p = RIGID_POINTS[1]
    se = {}
    for n in (25_000, 100_000):
        batch, _ = sample_batch(rigid, p, n, 0.0, 1.0, seed=5)
        se[n] = estimate_moments(batch, rigid, 0.0, 1.0).stderr
    assert se[25_000]["p1"] / se[100_000]["p1"] == pytest.approx(2.0, rel=0.2)
    np.testing.assert_allclose(se[25_000]["V"] / se[100_000]["V"], 2.0, rtol=0.2)


def test_resting_samples_reproduce_fluid_velocity(rigid):
    r = np.array([0.3, 0.9, 0.0])
    kf = kinetic_fields(eval_sample(rigid, r, 0.0), 1.0, rigid)
    n = np.cross(kf.b, [0.0, 0.0, 1.0])
    m = estimate_moments([TTPState(r, n, 0.0, 0.0)] * 30, rigid, 0.0, 1.0)
    np.testing.assert_allclose(m.V_hat, eval_sample(rigid, r, 0.0).V, rtol=1e-15, atol=1e-15)
    assert m.p1_hat == 0.0


def test_estimate_moments_cell_and_minimum(rigid):
    batch, _ = sample_batch(rigid, RIGID_POINTS[:1], 40, 0.0, 1.0, seed=0)
    estimate_moments(batch, rigid, 0.0, 1.0, cell=Box((0.9, -0.1, -0.1), (1.1, 0.1, 0.1)))
    with pytest.raises(InsufficientSamplesError):
        estimate_moments(batch, rigid, 0.0, 1.0, cell=Box((-1.0, -1.0, -1.0), (-0.5, -0.5, -0.5)))
    with pytest.raises(InsufficientSamplesError):
        estimate_moments([], rigid, 0.0, 1.0)


# --- HRE variance ---------------------------------------------------------------------


def test_hre_variance_million_samples(uniform):
    # uniform box: p1_hat = p0 + p - phi + nT over rho; p0 = 1.5 gives p1_hat = 1.5
    chk = hre_variance_check(uniform, [0.5] * 3, 0.0, 1.5, 1_000_000, seed=9)
    assert chk.rhs == pytest.approx(1.5)
    assert abs(chk.lhs - chk.rhs) < 5 * chk.stderr


def test_hre_variance_scales_with_p1_hat(uniform):
    a = hre_variance_check(uniform, [0.5] * 3, 0.0, 1.5, 5000, seed=2)
    b = hre_variance_check(uniform, [0.5] * 3, 0.0, 6.0, 5000, seed=2)
    assert b.rhs == pytest.approx(4 * a.rhs)
    assert b.lhs == pytest.approx(4 * a.lhs, rel=1e-14)
    assert hre_variance_check(uniform, [0.5] * 3, 0.0, 1.5, 5000, seed=2) == a
    with pytest.raises(ConfigurationError):
        hre_variance_check(uniform, [0.5] * 3, 0.0, 1.5, 1, seed=2)


# --- evolution ----------------------------------------------------------------------------


def test_config_validation(rigid):
    with pytest.raises(ConfigurationError):
        EnsembleConfig(n_particles=0, seed=1)
    with pytest.raises(ConfigurationError):
        EnsembleConfig(n_particles=10, seed=1, n_spawn_points=11)
    cfg = EnsembleConfig(100, 1, spawn_region=Box((0, 0, 0), (3, 3, 3)))
    with pytest.raises(ConfigurationError):
        cfg.region(rigid)


def test_zero_step_evolution_returns_spawn_moments(rigid):
    p0s = init_p0_state(rigid, 0.0, quadrature_grid(rigid, 4), p0=1.0)
    cfg = EnsembleConfig(600, 3, spawn_region=Box((-1, -1, -1), (1, 1, 1)), n_spawn_points=3)
    res = evolve_ensemble(cfg, rigid, p0s, 0.0, 0.01)
    assert len(res.snapshots) == 1 and res.snapshots[0].t == 0.0
    assert len(res.spawn_moments) == 3 and all(m.n_samples == 200 for m in res.spawn_moments)
    assert res.failures == {"left_domain": 0, "failed": 0, "alive": 600}
    # normalized along-trajectory ratios start at the f_1M moments
    for m in res.snapshots[0].moments:
        assert m.normalized and abs(m.p1_hat - 1.0) < 5 * m.stderr["p1"]


def test_taylor_green_ledger_is_flat(tg):
    grid = quadrature_grid(tg, 16)
    p0s = init_p0_state(tg, 0.0, grid)
    cfg = EnsembleConfig(200, 4, n_spawn_points=2)
    res = evolve_ensemble(cfg, tg, p0s, 0.2, 0.01, grid, snapshot_every=5)
    S = np.array([row[2] for row in res.p0_state.history])
    assert len(S) == 21
    assert np.max(np.abs(S - S[0])) < 1e-6
    assert [s.t for s in res.snapshots] == pytest.approx([0.0, 0.05, 0.1, 0.15, 0.2])


def test_particles_leaving_the_domain_are_counted(rigid, tmp_path):
    p0s = init_p0_state(rigid, 0.0, quadrature_grid(rigid, 4), p0=1.0)
    corner = Box((1.7, 1.7, -0.1), (1.95, 1.95, 0.1))
    res = evolve_ensemble(EnsembleConfig(64, 8, spawn_region=corner), rigid, p0s, 0.5, 0.01)
    assert res.failures["left_domain"] > 0
    assert sum(res.failures.values()) == 64
    assert res.failures["left_domain"] == int(np.sum(res.batch.status == LEFT_DOMAIN))
    path = tmp_path / "summary.json"
    res.write_json(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"config", "spawn_points", "spawn_moments", "snapshots", "entropy_ledger", "failures"}
    assert doc["config"]["spawn_region"] == {"min": [1.7, 1.7, -0.1], "max": [1.95, 1.95, 0.1]}


def test_evolve_rejects_off_grid_horizon(rigid):
    p0s = init_p0_state(rigid, 0.0, quadrature_grid(rigid, 4), p0=1.0)
    with pytest.raises(ConfigurationError):
        evolve_ensemble(EnsembleConfig(10, 1, spawn_region=Box((0.5,) * 3, (1.0,) * 3)), rigid, p0s, 0.105, 0.01)
    with pytest.raises(ConfigurationError):
        evolve_ensemble(EnsembleConfig(10, 1, n_spawn_points=3, spawn_region=Box((0.5,) * 3, (1.0,) * 3)),
                        rigid, p0s, 0.1, 0.01)
