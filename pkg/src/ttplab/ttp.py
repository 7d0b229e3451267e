"""Thermal tracer particles: Omega, mean-field forces and constrained RK4 stepping.

A TTP carries ``(r, n, beta)`` with relative velocity ``u = beta v_th(r, t) n``.
The integrator advances ``(r, u)`` under

    dr/dt = V + u
    du/dt = Omega x u + (u/2) D ln(p1_hat)/Dt

which is the time derivative of ``beta v_th n`` along the trajectory with
``dn/dt = Omega x n``.  After every step ``beta = |u|/v_th`` is re-measured
(its drift is the integration-quality metric), ``n`` is renormalized and
projected onto the plane orthogonal to ``b``.  Where ``grad p1_hat``
vanishes, Omega is set to zero, which freezes ``n``, and the step is flagged.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateGradientError, InvalidInitialCondition, NumericalCheckError
from .fields import FieldScenario, eval_sample, ns_acceleration, vorticity
from .kinetics import (
    EPS_GRAD,
    KineticFields,
    P0Stage,
    PseudoPressureState,
    QuadratureGrid,
    advance_p0,
    kinetic_fields,
    quadrature_grid,
)

TOL_ORTH = 1e-8

# status codes for batched integration
ALIVE, LEFT_DOMAIN, FAILED = 0, 1, 2


@dataclass(frozen=True)
class TTPState:
    r: np.ndarray
    n: np.ndarray
    beta: float
    t: float
    degenerate: bool = False
    tangency_defect: float = 0.0

    def u(self, v_th: float) -> np.ndarray:
        return self.beta * v_th * self.n


@dataclass(frozen=True)
class ITPState:
    r: np.ndarray
    u: np.ndarray
    t: float


@dataclass(frozen=True)
class ExtendedMoments:
    """Extended fluid fields Q and Pi together with their divergences at one event."""

    Q_flux: np.ndarray
    Pi: np.ndarray
    div_Q: float = 0.0
    div_Pi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        Pi = np.asarray(self.Pi, dtype=float)
        if Pi.shape != (3, 3) or not np.allclose(Pi, Pi.T, rtol=0, atol=1e-14 * max(1.0, np.abs(Pi).max())):
            raise ConfigurationError("Pi must be a symmetric 3x3 tensor")


# ---------------------------------------------------------------------------
# vectorized geometry of p1_hat along particles


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a, b):
    return np.sum(a * b, axis=-1)


class _Geometry:
    """Everything the TTP right-hand side needs at a batch of points."""

    __slots__ = ("V", "xi", "p1h", "g", "gnorm", "b", "H", "gt", "Dln", "degenerate")

    def __init__(self, scenario: FieldScenario, r, t, p0, dp0):
        k = scenario.kinematics(r, t)
        s = k["s"]
        self.V = k["V"]
        G = k["grad_V"]
        self.xi = np.stack(
            [G[..., 1, 2] - G[..., 2, 1], G[..., 2, 0] - G[..., 0, 2], G[..., 0, 1] - G[..., 1, 0]], axis=-1
        )
        self.p1h = k["q"] + p0 * s
        self.g = k["grad_q"] + p0 * k["grad_s"]
        self.H = k["hess_p1_part"] + p0 * k["hess_s"]
        self.gt = k["dt_grad_q"] + dp0 * k["grad_s"] + p0 * k["dt_grad_s"]
        p1h_t = k["dt_q"] + dp0 * s + p0 * k["dt_s"]
        self.Dln = (p1h_t + _dot(self.V, self.g)) / self.p1h
        self.gnorm = np.sqrt(_dot(self.g, self.g))
        self.degenerate = self.gnorm < EPS_GRAD * np.abs(self.p1h) / scenario.domain.scale
        safe = np.where(self.degenerate, 1.0, self.gnorm)
        self.b = self.g / safe[..., None]

    @property
    def v_th(self):
        return np.sqrt(2.0 * self.p1h)

    def omega(self, u):
        """Omega = b x db/dt - (xi . b) b with db/dt along dr/dt = V + u."""
        vel = self.V + u
        dg = self.gt + np.einsum("...ij,...j->...i", self.H, vel)
        db = (dg - self.b * _dot(self.b, dg)[..., None]) / np.where(self.degenerate, 1.0, self.gnorm)[..., None]
        om = _cross(self.b, db) - _dot(self.xi, self.b)[..., None] * self.b
        return np.where(self.degenerate[..., None], 0.0, om)

    def rhs(self, u):
        return self.V + u, _cross(self.omega(u), u) + 0.5 * self.Dln[..., None] * u


# ---------------------------------------------------------------------------
# single-event evaluators


def _kinetics_at(scenario, r, t, p0, dp0_dt):
    sample = eval_sample(scenario, r, t)
    return sample, kinetic_fields(sample, p0, scenario, dp0_dt)


def init_ttp(
    r0, u0, t0: float, p0: float, scenario: FieldScenario, dp0_dt: float = 0.0, tol_orth: float = TOL_ORTH
) -> TTPState:
    """Build a TTP from an initial relative velocity; u0 must be tangent to the p1_hat level set."""
    r0 = np.asarray(r0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    _, kf = _kinetics_at(scenario, r0, t0, p0, dp0_dt)
    speed = float(np.linalg.norm(u0))
    b = kf.b if kf.b_defined else None
    if speed == 0.0:
        n = _any_orthogonal(b if b is not None else np.array([0.0, 0.0, 1.0]))
        return TTPState(r=r0, n=n, beta=0.0, t=float(t0), degenerate=True)
    n = u0 / speed
    if b is not None:
        defect = float(np.dot(n, b))
        if abs(defect) > tol_orth:
            raise InvalidInitialCondition(f"u0 is not tangent to the p1_hat level set (n.b = {defect:.3e})")
    else:
        defect = 0.0
    return TTPState(
        r=r0, n=n, beta=speed / float(kf.v_th), t=float(t0), degenerate=b is None, tangency_defect=defect
    )


def _any_orthogonal(b):
    b = np.asarray(b, dtype=float)
    axis = np.zeros(3)
    axis[np.argmin(np.abs(b))] = 1.0
    e = axis - np.dot(axis, b) * b
    return e / np.linalg.norm(e)


def orthonormal_frame(b):
    """(e1, e2) completing b to a right-handed orthonormal frame (smallest-component axis seed)."""
    b = np.asarray(b, dtype=float)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    idx = np.argmin(np.abs(b), axis=-1)
    axis = np.zeros(b.shape)
    np.put_along_axis(axis, idx[..., None], 1.0, axis=-1)
    e1 = axis - _dot(axis, b)[..., None] * b
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = _cross(b, e1)
    return e1, e2


def _geometry_for(scenario, state: TTPState, t, p0, dp0_dt):
    geo = _Geometry(scenario, np.asarray(state.r, dtype=float), t, p0, dp0_dt)
    u = state.beta * geo.v_th * np.asarray(state.n, dtype=float)
    return geo, u


def omega(scenario: FieldScenario, state: TTPState, t: float, p0: float, dp0_dt: float = 0.0) -> np.ndarray:
    scenario.check_event(state.r, t)
    geo, u = _geometry_for(scenario, state, t, p0, dp0_dt)
    if np.any(geo.degenerate):
        raise DegenerateGradientError("grad p1_hat vanishes: Omega is undefined")
    return geo.omega(u)


def _force_parts(scenario, state: TTPState, t, p0, dp0_dt, strict=True):
    sample, kf = _kinetics_at(scenario, state.r, t, p0, dp0_dt)
    if strict and not kf.b_defined:
        raise DegenerateGradientError("grad p1_hat vanishes: the TTP force is undefined")
    geo, u = _geometry_for(scenario, state, t, p0, dp0_dt)
    return sample, kf, geo, u


def ttp_mean_field(
    scenario: FieldScenario, state: TTPState, t: float, p0: float, dp0_dt: float = 0.0, strict: bool = True
) -> np.ndarray:
    """F + gauge for a TTP: F_H + u.grad V + (u/2) D ln p1_hat/Dt + Omega x u_th.

    With ``strict=False`` a vanishing grad p1_hat uses Omega = 0 (the integrator's
    freeze policy) instead of raising.
    """
    sample, kf, geo, u = _force_parts(scenario, state, t, p0, dp0_dt, strict)
    F_H = ns_acceleration(sample, scenario)
    return (
        F_H
        + u @ sample.grad_V
        + 0.5 * u * float(kf.dln_p1hat_dt)
        + np.cross(geo.omega(u), u)
    )


def gauge_field_ttp(
    scenario: FieldScenario, state: TTPState, t: float, p0: float, dp0_dt: float = 0.0, strict: bool = True
) -> np.ndarray:
    """Gauge field Delta F_0 + Delta F_1 evaluated at u = u_th (``strict`` as in :func:`ttp_mean_field`)."""
    sample, kf, geo, u = _force_parts(scenario, state, t, p0, dp0_dt, strict)
    half_v2 = 0.5 * float(kf.v_th) ** 2
    grad_ln_rho = sample.grad_rho / sample.rho
    grad_ln_p1h = kf.grad_p1_hat / kf.p1_hat
    dF0 = -(half_v2 * grad_ln_rho + half_v2 * grad_ln_p1h * (state.beta**2 - 0.5))
    dF1 = np.cross(geo.omega(u), u)
    return dF0 + dF1


def _relative_acceleration(sample, kf: KineticFields, u):
    """F_u for the Gaussian KDF."""
    half_v2 = 0.5 * kf.v_th**2
    X2 = np.sum(u * u, axis=-1) / kf.v_th**2
    grad_ln_rho = sample.grad_rho / sample.rho[..., None]
    grad_ln_p1h = kf.grad_p1_hat / kf.p1_hat[..., None]
    return (
        half_v2[..., None] * grad_ln_rho
        + u * (kf.A / (2.0 * kf.p1))[..., None]
        + (half_v2 * (X2 - 0.5))[..., None] * grad_ln_p1h
    )


def itp_mean_field_gaussian(scenario: FieldScenario, state: ITPState, t: float, p0: float, dp0_dt: float = 0.0) -> np.ndarray:
    """Mean field F = F_H + F_u + u.grad V for the Gaussian KDF (zero gauge, F_a = 0)."""
    sample, kf = _kinetics_at(scenario, state.r, t, p0, dp0_dt)
    u = np.asarray(state.u, dtype=float)
    return ns_acceleration(sample, scenario) + _relative_acceleration(sample, kf, u) + u @ sample.grad_V


def f_a_extended(moments: ExtendedMoments, kf: KineticFields, rho: float, u) -> np.ndarray:
    """Extended-field correction (1/rho)[div Pi - grad p1] + (u/2p1)[div Q - grad ln p1_hat . Q]."""
    u = np.asarray(u, dtype=float)
    grad_ln_p1h = np.asarray(kf.grad_p1_hat) / kf.p1_hat
    first = (np.asarray(moments.div_Pi) - np.asarray(kf.grad_p1)) / rho
    second = u / (2.0 * kf.p1) * (moments.div_Q - np.dot(grad_ln_p1h, moments.Q_flux))
    return first + second


def delta_f_general(gauge_at_uth, kdf_ratio: float) -> np.ndarray:
    """Gauge field for a non-Gaussian KDF: Delta F_bar(u_th) * f(u_th) / f(u)."""
    return np.asarray(gauge_at_uth, dtype=float) * float(kdf_ratio)


# ---------------------------------------------------------------------------
# batched RK4 integration


@dataclass
class TTPBatch:
    """Struct-of-arrays container for many TTPs sharing one scenario and clock."""

    r: np.ndarray
    n: np.ndarray
    beta: np.ndarray
    t: float
    status: np.ndarray
    degenerate: np.ndarray
    tangency_defect: np.ndarray

    @classmethod
    def from_states(cls, states: Sequence[TTPState]) -> "TTPBatch":
        ts = {float(s.t) for s in states}
        if len(ts) != 1:
            raise ConfigurationError("all TTPs in a batch must share the same time")
        return cls(
            r=np.array([s.r for s in states], dtype=float),
            n=np.array([s.n for s in states], dtype=float),
            beta=np.array([s.beta for s in states], dtype=float),
            t=ts.pop(),
            status=np.zeros(len(states), dtype=np.int8),
            degenerate=np.array([s.degenerate for s in states], dtype=bool),
            tangency_defect=np.array([s.tangency_defect for s in states], dtype=float),
        )

    def state(self, i: int) -> TTPState:
        return TTPState(
            r=self.r[i].copy(), n=self.n[i].copy(), beta=float(self.beta[i]), t=self.t,
            degenerate=bool(self.degenerate[i]), tangency_defect=float(self.tangency_defect[i]),
        )

    def __len__(self):
        return len(self.beta)

    def copy(self) -> "TTPBatch":
        return TTPBatch(
            self.r.copy(), self.n.copy(), self.beta.copy(), self.t, self.status.copy(),
            self.degenerate.copy(), self.tangency_defect.copy(),
        )


@dataclass
class StepDiagnostics:
    beta_measured: np.ndarray
    tangency_defect: np.ndarray   # n.b before projection
    projection: np.ndarray        # |n_after - n_before|
    norm_defect: np.ndarray       # | |n| - 1 | after renormalization
    degenerate: np.ndarray
    post_defect: np.ndarray       # |n.b| after projection


def _step_arrays(scenario, r, n, beta, stages: Sequence[P0Stage], dt, geo0=None):
    """One RK4 step for arrays of particles; returns new arrays, diagnostics and the end geometry."""
    (t1, p1, d1), (t2, p2, d2), (t3, p3, d3), (t4, p4, d4) = [(s.t, s.p0, s.dp0_dt) for s in stages]
    if geo0 is None:
        geo0 = _Geometry(scenario, r, t1, p1, d1)
    u = beta[:, None] * geo0.v_th[:, None] * n
    h = dt
    kr1, ku1 = geo0.rhs(u)
    r2, u2 = r + 0.5 * h * kr1, u + 0.5 * h * ku1
    kr2, ku2 = _Geometry(scenario, r2, t2, p2, d2).rhs(u2)
    r3, u3 = r + 0.5 * h * kr2, u + 0.5 * h * ku2
    kr3, ku3 = _Geometry(scenario, r3, t3, p3, d3).rhs(u3)
    r4, u4 = r + h * kr3, u + h * ku3
    kr4, ku4 = _Geometry(scenario, r4, t4, p4, d4).rhs(u4)
    r_new = r + h / 6.0 * (kr1 + 2 * kr2 + 2 * kr3 + kr4)
    u_new = u + h / 6.0 * (ku1 + 2 * ku2 + 2 * ku3 + ku4)
    inside = np.ones(len(beta), dtype=bool)
    for pts in (r2, r3, r4, r_new):
        inside &= scenario.domain.contains(pts)
    return r_new, u_new, inside


def _finish(scenario, r_new, u_new, n_old, geo_end, project: bool):
    speed = np.sqrt(_dot(u_new, u_new))
    v_th = geo_end.v_th
    beta = speed / v_th
    moving = speed > 0
    n_raw = np.where(moving[:, None], u_new / np.where(moving, speed, 1.0)[:, None], n_old)
    defined = ~geo_end.degenerate
    defect = np.where(defined, _dot(n_raw, geo_end.b), 0.0)
    if project:
        n_proj = n_raw - np.where(defined, defect, 0.0)[:, None] * geo_end.b
    else:
        n_proj = n_raw
    n_new = n_proj / np.sqrt(_dot(n_proj, n_proj))[:, None]
    diag = StepDiagnostics(
        beta_measured=beta,
        tangency_defect=defect,
        projection=np.sqrt(_dot(n_new - n_raw, n_new - n_raw)),
        norm_defect=np.abs(np.sqrt(_dot(n_new, n_new)) - 1.0),
        degenerate=geo_end.degenerate.copy(),
        post_defect=np.where(defined, np.abs(_dot(n_new, geo_end.b)), 0.0),
    )
    return n_new, beta, diag


BACKENDS = ("numba", "numpy")


def default_backend() -> str:
    from . import _kernels

    return "numba" if _kernels.HAVE_NUMBA else "numpy"


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("TTPLAB_THREADS", "1"))
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    return threads


CHUNK = 256  # fixed work-unit size so results never depend on the thread count


def _numba_step(batch, scenario, stages, dt, next_p0, project, threads):
    from ._kernels import build_stepper

    comp = scenario._compiled
    kernel = build_stepper(comp.kin_source, EPS_GRAD)
    N = len(batch)
    st = np.array([[s.t, s.p0, s.dp0_dt] for s in stages], dtype=float)
    alpha = np.array(scenario.alpha, dtype=float).reshape(-1)
    lo = np.asarray(scenario.domain.lo, dtype=float)
    hi = np.asarray(scenario.domain.hi, dtype=float)
    eps_scale = EPS_GRAD / scenario.domain.scale
    alive = batch.status == ALIVE
    out = dict(
        r_out=np.empty_like(batch.r), n_out=np.empty_like(batch.n), beta_out=np.empty_like(batch.beta),
        defect=np.zeros(N), proj=np.zeros(N), normdef=np.zeros(N), post=np.zeros(N),
        degen=batch.degenerate.copy(), status=np.zeros(N, dtype=np.int8),
    )
    nxt = np.array(next_p0, dtype=float)

    def run(sl):
        kernel(batch.r[sl], batch.n[sl], batch.beta[sl], alive[sl], st, dt, alpha, nxt, lo, hi, eps_scale,
               bool(project), *(v[sl] for v in out.values()))

    slices = [slice(i, min(i + CHUNK, N)) for i in range(0, N, CHUNK)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, slices))
    else:
        for sl in slices:
            run(sl)
    ended = out["status"] != ALIVE
    keep = alive & ~ended
    batch.r = out["r_out"]
    batch.n = out["n_out"]
    batch.beta = out["beta_out"]
    batch.tangency_defect = np.where(keep, out["defect"], batch.tangency_defect)
    batch.degenerate = np.where(keep, out["degen"], batch.degenerate)
    batch.status = np.where(ended, out["status"], batch.status).astype(np.int8)
    diag = StepDiagnostics(
        beta_measured=batch.beta.copy(), tangency_defect=np.where(keep, out["defect"], 0.0),
        projection=np.where(keep, out["proj"], 0.0), norm_defect=np.where(keep, out["normdef"], 0.0),
        degenerate=np.where(keep, out["degen"], False), post_defect=np.where(keep, out["post"], 0.0),
    )
    return diag


def step_batch(
    batch: TTPBatch,
    scenario: FieldScenario,
    p0_state: PseudoPressureState,
    dt: float,
    project: bool = True,
    next_p0: tuple[float, float] | None = None,
    _geo0=None,
    backend: str | None = None,
    threads: int | None = None,
):
    """Advance every alive particle of the batch by one RK4 step (in place).

    ``p0_state`` must cover ``[batch.t, batch.t + dt]`` (advance p0 first).
    Returns the step diagnostics and, for the numpy backend, the end-of-step
    geometry, which can be reused as the first stage of the next step.
    """
    backend = backend or default_backend()
    if backend not in BACKENDS:
        raise ConfigurationError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    stages = p0_state.stages_for(batch.t, dt)
    t_end = batch.t + dt
    if next_p0 is None:
        next_p0 = (p0_state.p0, p0_state.dp0_dt) if abs(p0_state.t - t_end) <= 1e-12 * max(1.0, abs(t_end)) else (
            stages[-1].p0, stages[-1].dp0_dt
        )
    if t_end > scenario.t_span[1] * (1 + 1e-12) + 1e-300:
        raise ConfigurationError(f"step ends at t={t_end} beyond the scenario t_span {scenario.t_span}")
    if backend == "numba":
        diag = _numba_step(batch, scenario, stages, dt, next_p0, project, _resolve_threads(threads))
        batch.t = t_end
        return diag, None

    alive = batch.status == ALIVE
    if not np.all(alive):
        idx = np.flatnonzero(alive)
        sub = TTPBatch(batch.r[idx], batch.n[idx], batch.beta[idx], batch.t, batch.status[idx],
                       batch.degenerate[idx], batch.tangency_defect[idx])
        diag, _ = step_batch(sub, scenario, p0_state, dt, project, next_p0, backend="numpy")
        batch.r[idx], batch.n[idx], batch.beta[idx] = sub.r, sub.n, sub.beta
        batch.status[idx], batch.degenerate[idx], batch.tangency_defect[idx] = (
            sub.status, sub.degenerate, sub.tangency_defect)
        batch.t = t_end
        full = StepDiagnostics(*(np.zeros(len(batch)) for _ in range(4)), np.zeros(len(batch), dtype=bool),
                               np.zeros(len(batch)))
        for name in ("beta_measured", "tangency_defect", "projection", "norm_defect", "degenerate", "post_defect"):
            getattr(full, name)[idx] = getattr(diag, name)
        full.beta_measured[~alive] = batch.beta[~alive]
        return full, None

    r_new, u_new, inside = _step_arrays(scenario, batch.r, batch.n, batch.beta, stages, dt, _geo0)
    r_eval = np.where(inside[:, None], r_new, batch.r)
    geo_end = _Geometry(scenario, r_eval, t_end, *next_p0)
    failed = inside & ~(geo_end.p1h > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_new, beta_new, diag = _finish(scenario, r_new, u_new, batch.n, geo_end, project)
    keep = inside & ~failed
    for name in ("tangency_defect", "projection", "norm_defect", "post_defect"):
        setattr(diag, name, np.where(keep, getattr(diag, name), 0.0))
    diag.degenerate = np.where(keep, diag.degenerate, False)
    batch.r = np.where(keep[:, None], r_new, batch.r)
    batch.n = np.where(keep[:, None], n_new, batch.n)
    batch.beta = np.where(keep, beta_new, batch.beta)
    diag.beta_measured = batch.beta.copy()
    batch.tangency_defect = np.where(keep, diag.tangency_defect, batch.tangency_defect)
    batch.degenerate = np.where(keep, diag.degenerate, batch.degenerate)
    batch.status = np.where(keep, batch.status, np.where(failed, FAILED, LEFT_DOMAIN)).astype(np.int8)
    batch.t = t_end
    return diag, (geo_end if np.all(keep) else None)


def step_ttp(
    state: TTPState,
    scenario: FieldScenario,
    p0_state: PseudoPressureState,
    dt: float,
    project: bool = True,
    strict: bool = True,
) -> TTPState:
    """One RK4 step of a single TTP.

    With ``strict`` a vanishing grad p1_hat at the end point raises
    DegenerateGradientError; otherwise the state is returned flagged with n frozen.
    """
    batch = TTPBatch.from_states([state])
    diag, _ = step_batch(batch, scenario, p0_state, dt, project)
    if strict and diag.degenerate[0]:
        raise DegenerateGradientError("grad p1_hat vanishes at the end of the step")
    if batch.status[0] == LEFT_DOMAIN:
        raise NumericalCheckError("trajectory left the scenario domain")
    if batch.status[0] == FAILED:
        raise NumericalCheckError("p1 lost positivity at the particle position")
    return batch.state(0)


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)

    COLUMNS = ("t", "r.x", "r.y", "r.z", "n.x", "n.y", "n.z", "beta", "tangency_defect", "|u|")

    def record(self, batch: TTPBatch, i: int, v_th: float):
        self.rows.append(
            (batch.t, *batch.r[i], *batch.n[i], batch.beta[i], batch.tangency_defect[i], batch.beta[i] * v_th)
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(self.COLUMNS)
            for row in self.rows:
                out.writerow([repr(float(v)) for v in row])


@dataclass
class RunResult:
    batch: TTPBatch
    p0_state: PseudoPressureState
    max_beta_drift: np.ndarray
    max_tangency_defect: np.ndarray
    max_norm_defect: np.ndarray
    max_post_projection_defect: np.ndarray
    degenerate_steps: np.ndarray
    trajectories: list[Trajectory] | None = None


def v_th_at(scenario: FieldScenario, r, t: float, p0: float) -> np.ndarray:
    k = scenario.kinematics(np.asarray(r, dtype=float), t)
    return np.sqrt(2.0 * (k["q"] + p0 * k["s"]))


def integrate_batch(
    batch: TTPBatch,
    scenario: FieldScenario,
    p0_state: PseudoPressureState,
    n_steps: int,
    dt: float,
    grid: QuadratureGrid | None = None,
    project: bool = True,
    record_every: int = 0,
    backend: str | None = None,
    threads: int | None = None,
) -> RunResult:
    """Advance p0 and the particles jointly for ``n_steps`` RK4 steps."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if grid is None and not p0_state.stationary:
        grid = quadrature_grid(scenario)
    beta0 = batch.beta.copy()
    N = len(batch)
    max_drift = np.zeros(N)
    max_defect = np.zeros(N)
    max_norm = np.zeros(N)
    max_post = np.zeros(N)
    degenerate_steps = np.zeros(N, dtype=int)
    trajs = [Trajectory() for _ in range(N)] if record_every else None

    def record():
        v = v_th_at(scenario, batch.r, batch.t, p0_state.p0)
        for i in range(N):
            trajs[i].record(batch, i, v[i])

    if trajs is not None:
        record()
    geo = None
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(beta0 > 0, 1.0 / beta0, 0.0)
    for k in range(n_steps):
        p0_state = advance_p0(p0_state, scenario, dt, grid)
        diag, geo = step_batch(batch, scenario, p0_state, dt, project, _geo0=geo, backend=backend, threads=threads)
        alive = batch.status == ALIVE
        max_drift = np.where(alive, np.maximum(max_drift, np.abs(batch.beta - beta0) * rel), max_drift)
        max_defect = np.where(alive, np.maximum(max_defect, np.abs(diag.tangency_defect)), max_defect)
        max_norm = np.where(alive, np.maximum(max_norm, diag.norm_defect), max_norm)
        degenerate_steps += (diag.degenerate & alive).astype(int)
        if project:
            max_post = np.where(alive, np.maximum(max_post, diag.post_defect), max_post)
        if trajs is not None and ((k + 1) % record_every == 0 or k + 1 == n_steps):
            record()
    return RunResult(batch, p0_state, max_drift, max_defect, max_norm, max_post, degenerate_steps, trajs)


# ---------------------------------------------------------------------------
# Liouville check


def _itp_rhs(scenario, x, t, p0, dp0):
    """(dr/dt, dv/dt, div_v F) for phase points x = (r, v) under the Gaussian mean field."""
    r, v = x[:, :3], x[:, 3:]
    sample = eval_sample(scenario, r, t)
    kf = kinetic_fields(sample, p0, scenario, dp0)
    u = v - sample.V
    F = ns_acceleration(sample, scenario) + _relative_acceleration(sample, kf, u) + np.einsum(
        "...i,...ij->...j", u, sample.grad_V
    )
    div = 1.5 * kf.A / kf.p1 + sample.div_V + np.sum(u * kf.grad_p1_hat, axis=-1) / kf.p1_hat
    return np.concatenate([v, F], axis=1), div


@dataclass(frozen=True)
class LiouvilleCheck:
    numeric: float
    analytic: float
    det_forward: float
    condition: float


def liouville_jacobian_check(
    scenario: FieldScenario,
    itp0: ITPState,
    p0_state: PseudoPressureState,
    t1: float,
    dt: float,
    grid: QuadratureGrid | None = None,
    h: float = 1e-5,
) -> LiouvilleCheck:
    """Compare the phase-space Jacobian of the flow map with exp(-integral of div_v F).

    ``numeric`` is the determinant of the backward map, i.e. ``1 / det(dx(t1)/dx(t0))``
    from central differences of 12 perturbed trajectories; ``analytic`` is
    ``exp(-int div_v F dt)`` along the reference trajectory.
    """
    if grid is None and not p0_state.stationary:
        grid = quadrature_grid(scenario)
    sample0 = eval_sample(scenario, itp0.r, itp0.t)
    x0 = np.concatenate([np.asarray(itp0.r, float), np.asarray(itp0.u, float) + sample0.V])
    scale = np.maximum(np.abs(x0), 1.0)
    X = np.tile(x0, (13, 1))
    for k in range(6):
        X[1 + 2 * k, k] += h * scale[k]
        X[2 + 2 * k, k] -= h * scale[k]
    integral = 0.0
    t = itp0.t
    n_steps = int(round((t1 - itp0.t) / dt))
    if n_steps < 1 or abs(n_steps * dt - (t1 - itp0.t)) > 1e-9 * max(1.0, abs(t1)):
        raise ConfigurationError("t1 - t0 must be a positive multiple of dt")
    for _ in range(n_steps):
        p0_state = advance_p0(p0_state, scenario, dt, grid)
        st = p0_state.stages_for(t, dt)
        k1, d1 = _itp_rhs(scenario, X, st[0].t, st[0].p0, st[0].dp0_dt)
        k2, d2 = _itp_rhs(scenario, X + 0.5 * dt * k1, st[1].t, st[1].p0, st[1].dp0_dt)
        k3, d3 = _itp_rhs(scenario, X + 0.5 * dt * k2, st[2].t, st[2].p0, st[2].dp0_dt)
        k4, d4 = _itp_rhs(scenario, X + dt * k3, st[3].t, st[3].p0, st[3].dp0_dt)
        X = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        integral += dt / 6.0 * (d1[0] + 2 * d2[0] + 2 * d3[0] + d4[0])
        t += dt
    J = np.stack([(X[1 + 2 * k] - X[2 + 2 * k]) / (2 * h * scale[k]) for k in range(6)], axis=1)
    cond = float(np.linalg.cond(J))
    if not np.isfinite(cond) or cond > 1e10:
        raise NumericalCheckError(f"flow-map Jacobian ill-conditioned (cond = {cond:.3e})")
    det = float(np.linalg.det(J))
    return LiouvilleCheck(numeric=1.0 / det, analytic=float(np.exp(-integral)), det_forward=det, condition=cond)
