"""Monte-Carlo TTP ensembles drawn from the Gaussian conditional KDF f_1M.

On the tangent plane of the p1_hat level set (measure ``deta = u^2 du dphi``)

    f_1M(u) = 2 rho / (pi^(3/2) v_th^3) exp(-u^2 / v_th^2),

so that ``beta = u / v_th`` has density ``(4/sqrt(pi)) beta^2 exp(-beta^2)``
(``beta^2 ~ Gamma(3/2)``) and the azimuth is uniform.  Random streams are
derived per fixed-size block of particle indices, so draws never depend on
how work is scheduled.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError, EstimationError, InsufficientSamplesError, InvalidSampleError
from .fields import Box, FieldScenario, eval_sample
from .kinetics import PseudoPressureState, QuadratureGrid, kinetic_fields, quadrature_grid
from .ttp import ALIVE, FAILED, LEFT_DOMAIN, TTPBatch, TTPState, integrate_batch, orthonormal_frame

BLOCK = 4096
MIN_SAMPLES = 30
_SPAWN_KEY, _PARTICLE_KEY, _HRE_KEY = 0, 1, 2


def block_rng(seed: int, key: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key, block)))


def block_uniforms(seed: int, key: int, n: int, width: int) -> np.ndarray:
    """``(n, width)`` uniforms; row i always comes from the stream of block ``i // BLOCK``."""
    out = np.empty((n, width))
    for b, start in enumerate(range(0, n, BLOCK)):
        stop = min(start + BLOCK, n)
        out[start:stop] = block_rng(seed, key, b).random((BLOCK, width))[: stop - start]
    return out


def beta_quantile(u) -> np.ndarray:
    """Inverse CDF of the density (4/sqrt(pi)) beta^2 exp(-beta^2)."""
    return np.sqrt(special.gammaincinv(1.5, np.asarray(u, dtype=float)))


def beta_cdf(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    return special.erf(beta) - 2.0 / math.sqrt(math.pi) * beta * np.exp(-beta * beta)


def f1m_density(u, rho, v_th) -> np.ndarray:
    """Gaussian conditional KDF on the tangent plane, per unit ``u^2 du dphi``."""
    u = np.asarray(u, dtype=float)
    return 2.0 * rho / (math.pi**1.5 * v_th**3) * np.exp(-(u * u) / (v_th * v_th))


def proposal_density(u, v_th) -> np.ndarray:
    """Sampling density of (beta, phi) expressed per unit ``u^2 du dphi``.

    (beta, phi) has density (4/sqrt(pi)) beta^2 exp(-beta^2) / (2 pi); the
    change of measure divides by u^2 v_th, and beta^2 / u^2 = 1 / v_th^2 is
    cancelled analytically so that tiny speeds do not underflow.
    """
    beta = np.asarray(u, dtype=float) / v_th
    return 4.0 / math.sqrt(math.pi) / (2.0 * math.pi) * np.exp(-beta * beta) / v_th**3


def f1m_normalization(rho: float, v_th: float) -> float:
    """Integral of f_1M over the tangent plane by quadrature in (u, phi)."""
    val, _ = integrate.quad(lambda u: u * u * f1m_density(u, rho, v_th), 0.0, np.inf, epsabs=0, epsrel=1e-13)
    return 2.0 * math.pi * val


def check_normalization(scenario: FieldScenario, r, t: float, p0: float, tol: float = 1e-10) -> float:
    sample = eval_sample(scenario, r, t)
    kf = kinetic_fields(sample, p0, scenario)
    rho = float(sample.rho)
    got = f1m_normalization(rho, float(kf.v_th))
    if abs(got - rho) > tol * rho:
        raise EstimationError(f"f_1M normalization {got!r} differs from rho = {rho!r}")
    return got


# ---------------------------------------------------------------------------
# sampling


def _draw(kf, uniforms):
    if not np.all(kf.b_defined):
        raise InvalidSampleError("grad p1_hat vanishes at a spawn point: the tangent plane is undefined")
    e1, e2 = orthonormal_frame(kf.b)
    beta = beta_quantile(uniforms[..., 0])
    phi = 2.0 * math.pi * uniforms[..., 1]
    n = np.cos(phi)[..., None] * e1 + np.sin(phi)[..., None] * e2
    return n, beta


def sample_ttp(scenario: FieldScenario, r, t: float, p0: float, rng: np.random.Generator) -> TTPState:
    """One TTP at ``r`` drawn from f_1M."""
    r = np.asarray(r, dtype=float)
    kf = kinetic_fields(eval_sample(scenario, r, t), p0, scenario)
    n, beta = _draw(kf, rng.random(2))
    return TTPState(r=r, n=n, beta=float(beta), t=float(t))


def sample_batch(
    scenario: FieldScenario, points, n_per_point: int, t: float, p0: float, seed: int
) -> tuple[TTPBatch, np.ndarray]:
    """``n_per_point`` TTPs at each spawn point; returns the batch and per-particle origin tags."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if n_per_point < 1:
        raise ConfigurationError("n_per_point must be >= 1")
    tags = np.repeat(np.arange(len(points)), n_per_point)
    r = points[tags]
    kf = kinetic_fields(eval_sample(scenario, points, t), p0, scenario)
    if not np.all(kf.b_defined):
        raise InvalidSampleError("grad p1_hat vanishes at a spawn point: the tangent plane is undefined")
    U = block_uniforms(seed, _PARTICLE_KEY, len(tags), 2)
    e1, e2 = orthonormal_frame(kf.b)
    beta = beta_quantile(U[:, 0])
    phi = 2.0 * math.pi * U[:, 1]
    n = np.cos(phi)[:, None] * e1[tags] + np.sin(phi)[:, None] * e2[tags]
    N = len(tags)
    batch = TTPBatch(
        r=r, n=n, beta=beta, t=float(t), status=np.zeros(N, dtype=np.int8),
        degenerate=np.zeros(N, dtype=bool), tangency_defect=np.sum(n * kf.b[tags], axis=1),
    )
    return batch, tags


# ---------------------------------------------------------------------------
# moments


@dataclass
class MomentEstimate:
    rho_hat: float
    V_hat: np.ndarray
    p1_hat: float
    stderr: dict
    n_samples: int
    normalized: bool = False  # True for along-trajectory ratios (targets rho=1, V=0, p1=1)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho_hat, "V": [float(v) for v in self.V_hat], "p1": self.p1_hat,
            "stderr": {k: (np.asarray(v).tolist()) for k, v in self.stderr.items()},
            "n_samples": self.n_samples, "normalized": self.normalized,
        }


def _as_batch(samples) -> TTPBatch:
    if isinstance(samples, TTPBatch):
        return samples
    samples = list(samples)
    if not samples:
        raise InsufficientSamplesError("no samples supplied")
    return TTPBatch.from_states(samples)


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    se = np.std(x, axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.full(np.shape(x.mean(axis)), np.inf)
    return x.mean(axis=axis), se


def estimate_moments(samples, scenario: FieldScenario, t: float, p0: float, cell: Box | None = None) -> MomentEstimate:
    """Importance-weighted estimates of rho, V, p1 from TTPs sitting at their spawn points.

    Each sample carries weight ``f_1M / q`` with ``q`` the density it was drawn
    from, so ``rho_hat = mean(w)``, ``V_hat = sum w (V + u) / sum w`` and
    ``p1_hat = mean(w u^2 / 3)``.
    """
    batch = _as_batch(samples)
    mask = batch.status == ALIVE
    if cell is not None:
        mask &= cell.contains(batch.r)
    m = int(mask.sum())
    if m < MIN_SAMPLES:
        raise InsufficientSamplesError(f"{m} samples in cell, need at least {MIN_SAMPLES}")
    r = batch.r[mask]
    sample = eval_sample(scenario, r, t)
    kf = kinetic_fields(sample, p0, scenario)
    u_mag = batch.beta[mask] * kf.v_th
    u = u_mag[:, None] * batch.n[mask]
    w = f1m_density(u_mag, sample.rho, kf.v_th) / proposal_density(u_mag, kf.v_th)
    rho_hat, rho_se = _mean_se(w)
    wv = w[:, None] * (sample.V + u)
    wv_mean, _ = _mean_se(wv)
    V_hat = wv_mean / rho_hat
    # delta-method standard error of the ratio estimator
    V_se = np.std(wv - V_hat * w[:, None], axis=0, ddof=1) / math.sqrt(m) / rho_hat
    p1_hat, p1_se = _mean_se(w * u_mag**2 / 3.0)
    return MomentEstimate(
        rho_hat=float(rho_hat), V_hat=V_hat, p1_hat=float(p1_hat),
        stderr={"rho": float(rho_se), "V": V_se, "p1": float(p1_se)}, n_samples=m,
    )


def snapshot_ratios(batch: TTPBatch, mask, scenario: FieldScenario, p0: float) -> MomentEstimate:
    """Along-trajectory moment ratios: mean(u / v_th) and mean(u^2 / (3 p1_hat)) at the current positions."""
    mask = mask & (batch.status == ALIVE)
    m = int(mask.sum())
    if m < 2:
        raise InsufficientSamplesError("fewer than two live particles")
    beta = batch.beta[mask]
    V_hat, V_se = _mean_se(beta[:, None] * batch.n[mask])
    p1_hat, p1_se = _mean_se(2.0 * beta**2 / 3.0)
    return MomentEstimate(
        rho_hat=1.0, V_hat=V_hat, p1_hat=float(p1_hat), stderr={"rho": 0.0, "V": V_se, "p1": float(p1_se)},
        n_samples=m, normalized=True,
    )


# ---------------------------------------------------------------------------
# HRE variance


@dataclass(frozen=True)
class VarianceCheck:
    lhs: float
    rhs: float
    stderr: float
    n_samples: int


def hre_variance_check(scenario: FieldScenario, r, t: float, p0: float, n_samples: int, seed: int) -> VarianceCheck:
    """Sample mean of |dV|^2 / 3 for dV drawn from the full 3D Gaussian, against p1_hat."""
    if n_samples < 2:
        raise ConfigurationError("n_samples must be >= 2")
    kf = kinetic_fields(eval_sample(scenario, np.asarray(r, dtype=float), t), p0, scenario)
    sigma = math.sqrt(float(kf.p1_hat))  # per-component std: v_th^2 / 2 = p1_hat
    chunks = []
    for b, start in enumerate(range(0, n_samples, BLOCK)):
        k = min(BLOCK, n_samples - start)
        chunks.append(block_rng(seed, _HRE_KEY, b).standard_normal((BLOCK, 3))[:k])
    dV = sigma * np.concatenate(chunks)
    lhs, se = _mean_se(np.sum(dV * dV, axis=1) / 3.0)
    return VarianceCheck(lhs=float(lhs), rhs=float(kf.p1_hat), stderr=float(se), n_samples=n_samples)


# ---------------------------------------------------------------------------
# ensemble evolution


@dataclass(frozen=True)
class EnsembleConfig:
    n_particles: int
    seed: int
    spawn_region: Box | None = None
    t0: float = 0.0
    n_spawn_points: int = 1

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigurationError("n_particles must be >= 1")
        if self.n_spawn_points < 1 or self.n_spawn_points > self.n_particles:
            raise ConfigurationError("need 1 <= n_spawn_points <= n_particles")

    def region(self, scenario: FieldScenario) -> Box:
        region = self.spawn_region or scenario.domain
        if not region.issubset(scenario.domain):
            raise ConfigurationError("spawn_region must lie inside the scenario domain")
        return region


def spawn_points(config: EnsembleConfig, scenario: FieldScenario) -> np.ndarray:
    region = config.region(scenario)
    U = block_uniforms(config.seed, _SPAWN_KEY, config.n_spawn_points, 3)
    lo, hi = np.asarray(region.lo), np.asarray(region.hi)
    return lo + (hi - lo) * U


@dataclass
class Snapshot:
    t: float
    moments: list  # one MomentEstimate per spawn point


@dataclass
class EnsembleResult:
    config: EnsembleConfig
    batch: TTPBatch
    tags: np.ndarray
    points: np.ndarray
    spawn_moments: list
    snapshots: list
    p0_state: PseudoPressureState
    failures: dict = field(default_factory=dict)

    def summary(self) -> dict:
        cfg = asdict(self.config)
        if self.config.spawn_region is not None:
            cfg["spawn_region"] = {"min": list(self.config.spawn_region.lo), "max": list(self.config.spawn_region.hi)}
        return {
            "config": cfg,
            "spawn_points": self.points.tolist(),
            "spawn_moments": [m.to_dict() for m in self.spawn_moments],
            "snapshots": [
                {"t": s.t, "moments": [None if m is None else m.to_dict() for m in s.moments]} for s in self.snapshots
            ],
            "entropy_ledger": [
                {"t": t, "p0": p0, "S_fM": S, "dS_T_dt": d} for (t, p0, S, d) in self.p0_state.history
            ],
            "failures": self.failures,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _snapshot(batch, tags, n_points, scenario, p0) -> Snapshot:
    moments = []
    for k in range(n_points):
        try:
            moments.append(snapshot_ratios(batch, tags == k, scenario, p0))
        except InsufficientSamplesError:
            moments.append(None)
    return Snapshot(t=batch.t, moments=moments)


def evolve_ensemble(
    config: EnsembleConfig,
    scenario: FieldScenario,
    p0_state: PseudoPressureState,
    t1: float,
    dt: float,
    grid: QuadratureGrid | None = None,
    snapshot_every: int = 0,
    threads: int | None = None,
    backend: str | None = None,
) -> EnsembleResult:
    """Spawn ``config.n_particles`` TTPs from f_1M and advance them with p0 to ``t1``."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if abs(p0_state.t - config.t0) > 1e-12 * max(1.0, abs(config.t0)):
        raise ConfigurationError("p0_state must start at config.t0")
    n_steps = int(round((t1 - config.t0) / dt))
    if n_steps < 0 or abs(n_steps * dt - (t1 - config.t0)) > 1e-9 * max(1.0, abs(t1)):
        raise ConfigurationError("t1 - t0 must be a non-negative multiple of dt")
    if grid is None and not p0_state.stationary:
        grid = quadrature_grid(scenario)
    points = spawn_points(config, scenario)
    for p in points:
        check_normalization(scenario, p, config.t0, p0_state.p0)
    per_point = config.n_particles // config.n_spawn_points
    if per_point * config.n_spawn_points != config.n_particles:
        raise ConfigurationError("n_particles must be a multiple of n_spawn_points")
    batch, tags = sample_batch(scenario, points, per_point, config.t0, p0_state.p0, config.seed)
    spawn_moments = []
    for k in range(config.n_spawn_points):
        sel = tags == k
        sub = TTPBatch(batch.r[sel], batch.n[sel], batch.beta[sel], batch.t, batch.status[sel],
                       batch.degenerate[sel], batch.tangency_defect[sel])
        try:
            spawn_moments.append(estimate_moments(sub, scenario, config.t0, p0_state.p0))
        except InsufficientSamplesError:
            spawn_moments.append(None)

    snapshots = [_snapshot(batch, tags, config.n_spawn_points, scenario, p0_state.p0)]
    every = snapshot_every if snapshot_every > 0 else max(n_steps, 1)
    done = 0
    while done < n_steps:
        k = min(every, n_steps - done)
        res = integrate_batch(batch, scenario, p0_state, k, dt, grid, backend=backend, threads=threads)
        batch, p0_state = res.batch, res.p0_state
        done += k
        snapshots.append(_snapshot(batch, tags, config.n_spawn_points, scenario, p0_state.p0))
        n_failed = int(np.sum(batch.status == FAILED))
        if n_failed > 0.5 * len(batch):
            raise EstimationError(f"{n_failed} of {len(batch)} particles failed")
    failures = {
        "left_domain": int(np.sum(batch.status == LEFT_DOMAIN)),
        "failed": int(np.sum(batch.status == FAILED)),
        "alive": int(np.sum(batch.status == ALIVE)),
    }
    return EnsembleResult(config, batch, tags, points, spawn_moments, snapshots, p0_state, failures)
