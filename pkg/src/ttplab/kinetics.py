"""Kinetic quantities, Gaussian entropy and the pseudo-pressure p0(t)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq

from .errors import ConfigurationError, InvalidSampleError, PositivityError, SolverError, StepRejected
from .fields import Box, FieldScenario, FluidSample, eval_sample, heat_source, viscous_dissipation

EPS_GRAD = 1e-12
ENTROPY_CONST = 1.5 * (1.0 + math.log(2.0 * math.pi))


@dataclass(frozen=True)
class KineticFields:
    p1: np.ndarray
    p1_hat: np.ndarray
    v_th: np.ndarray
    grad_p1: np.ndarray
    grad_p1_hat: np.ndarray
    b: np.ndarray
    b_defined: np.ndarray
    A: np.ndarray
    dln_p1hat_dt: np.ndarray


def grad_threshold(p1_hat, scenario: FieldScenario):
    """|grad p1_hat| below this marks b as undefined (relative to p1_hat / domain scale)."""
    return EPS_GRAD * np.abs(p1_hat) / scenario.domain.scale


def kinetic_fields(sample: FluidSample, p0, scenario: FieldScenario, dp0_dt=0.0) -> KineticFields:
    rho = np.asarray(sample.rho)
    if np.any(rho <= 0):
        raise InvalidSampleError("rho must be positive")
    w = sample.p - sample.phi + sample.n * sample.T
    p1 = p0 + w
    if np.any(p1 <= 0):
        raise PositivityError(f"kinetic pressure not positive (min p1 = {np.min(p1):.3e}); p0 too small")
    p1_hat = p1 / rho
    v_th = np.sqrt(2.0 * p1_hat)
    g = sample.grad_q + np.asarray(p0)[..., None] * sample.grad_s
    gnorm = np.linalg.norm(g, axis=-1)
    defined = gnorm >= grad_threshold(p1_hat, scenario)
    with np.errstate(invalid="ignore", divide="ignore"):
        b = np.where(defined[..., None], g / gnorm[..., None], np.nan)
    grad_p1 = rho[..., None] * g + p1_hat[..., None] * sample.grad_rho

    V = sample.V
    Dq = sample.dt_q + np.sum(V * sample.grad_q, axis=-1)
    Ds = sample.dt_s + np.sum(V * sample.grad_s, axis=-1)
    DT = sample.dt_T + np.sum(V * sample.grad_T, axis=-1)
    Dp1_hat = Dq + dp0_dt * sample.s + p0 * Ds
    # A = rho D/Dt[(p0 + p - phi)/rho] + n K
    A = rho * (Dp1_hat - DT / scenario.m_ref) + sample.n * heat_source(sample, scenario)
    return KineticFields(
        p1=p1, p1_hat=p1_hat, v_th=v_th, grad_p1=grad_p1, grad_p1_hat=g, b=b,
        b_defined=defined, A=A, dln_p1hat_dt=Dp1_hat / p1_hat,
    )


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product Gauss-Legendre nodes over a box.

    ``order`` is the number of nodes per axis.  An axis along which every
    integrand is constant may carry a single node (weight = edge length).
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: tuple[int, int, int]
    domain: Box

    @classmethod
    def box(cls, domain: Box, order=16) -> "QuadratureGrid":
        orders = (order,) * 3 if np.isscalar(order) else tuple(int(o) for o in order)
        if len(orders) != 3 or min(orders) < 1:
            raise ConfigurationError(f"bad quadrature order {order}")
        axes, wts = [], []
        for lo, hi, m in zip(domain.lo, domain.hi, orders):
            x, w = leggauss(m)
            axes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            wts.append(0.5 * (hi - lo) * w)
        mesh = np.meshgrid(*axes, indexing="ij")
        wmesh = np.meshgrid(*wts, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=-1)
        weights = wmesh[0].ravel() * wmesh[1].ravel() * wmesh[2].ravel()
        return cls(nodes=nodes, weights=weights, order=orders, domain=domain)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def quadrature_grid(scenario: FieldScenario, order: int = 16) -> QuadratureGrid:
    """Grid over the scenario box, collapsing axes the fields do not depend on."""
    dep = scenario.coordinate_dependence
    return QuadratureGrid.box(scenario.domain, tuple(order if d else 1 for d in dep))


def _grid_sample(scenario: FieldScenario, t: float, grid: QuadratureGrid) -> FluidSample:
    return eval_sample(scenario, grid.nodes, t)


def _w(sample: FluidSample):
    return sample.p - sample.phi + sample.n * sample.T


def _entropy_from(sample: FluidSample, p0, grid: QuadratureGrid) -> float:
    p1 = p0 + _w(sample)
    if np.any(p1 <= 0):
        raise PositivityError(f"p1 <= 0 on the quadrature grid (min {np.min(p1):.3e})")
    rho = sample.rho
    return grid.integrate(rho * (1.5 * np.log(p1) - 2.5 * np.log(rho) + ENTROPY_CONST))


def gaussian_entropy(scenario: FieldScenario, p0: float, t: float, grid: QuadratureGrid) -> float:
    """Boltzmann-Shannon entropy of the Gaussian KDF, integrated over the grid."""
    return _entropy_from(_grid_sample(scenario, t, grid), p0, grid)


def entropy_slope(scenario: FieldScenario, p0: float, t: float, grid: QuadratureGrid) -> float:
    """dS/dp0 = (3/2) int rho / p1."""
    s = _grid_sample(scenario, t, grid)
    return grid.integrate(1.5 * s.rho / (p0 + _w(s)))


def p0_floor(scenario: FieldScenario, t: float, grid: QuadratureGrid) -> float:
    """p0 value at which p1 first vanishes on the grid: max(phi - p - n T)."""
    return float(np.max(-_w(_grid_sample(scenario, t, grid))))


def solve_initial_p0(
    scenario: FieldScenario, t0: float, grid: QuadratureGrid, upper_factor: float = 1e6, tol: float = 1e-10
) -> float:
    """p0 such that the Gaussian entropy vanishes at t0 (bracketed root + Newton polish)."""
    sample = _grid_sample(scenario, t0, grid)
    w = _w(sample)
    floor = float(np.max(-w))
    scale = max(abs(floor), float(np.max(np.abs(w))), 1.0)
    lo, hi = floor + 1e-9 * scale, floor + upper_factor * scale

    def S(p0):
        return _entropy_from(sample, p0, grid)

    s_lo, s_hi = S(lo), S(hi)
    if not (s_lo < 0.0 < s_hi):
        raise SolverError(f"no entropy root in p0 bracket [{lo:.6g}, {hi:.6g}] (S = {s_lo:.3g}, {s_hi:.3g})")
    p0 = brentq(S, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    best, best_val = p0, abs(S(p0))
    for _ in range(4):
        if best_val < 1e-3 * tol:
            break
        slope = grid.integrate(1.5 * sample.rho / (best + w))
        cand = best - S(best) / slope
        if cand > floor and abs(S(cand)) < best_val:
            best, best_val = cand, abs(S(cand))
        else:
            break
    if best_val > tol:
        raise SolverError(f"entropy root not resolved: |S| = {best_val:.3e} > {tol:.1e}")
    return float(best)


# ---------------------------------------------------------------------------
# entropy production and the p0 ODE


def entropy_production_density(sample: FluidSample, scenario: FieldScenario) -> np.ndarray:
    """Local entropy production n J_T / T + k |grad T|^2 / T^2 + dissipation / T."""
    T = np.asarray(sample.T)
    if np.any(T <= 0):
        raise InvalidSampleError("temperature must be positive in a thermal scenario")
    nJ = -np.sum(sample.V * sample.f_body, axis=-1) + sample.q_ext
    return (
        nJ / T
        + scenario.k_cond * np.sum(sample.grad_T**2, axis=-1) / T**2
        + viscous_dissipation(sample, scenario) / T
    )


def _production(sample: FluidSample, scenario: FieldScenario, grid: QuadratureGrid) -> float:
    if scenario.isothermal:
        return 0.0
    return grid.integrate(entropy_production_density(sample, scenario))


def entropy_production(scenario: FieldScenario, t: float, grid: QuadratureGrid) -> float:
    """Global thermodynamic entropy production rate (zero for isothermal scenarios)."""
    if scenario.isothermal:
        return 0.0
    return _production(_grid_sample(scenario, t, grid), scenario, grid)


def _p0_rate(sample: FluidSample, scenario: FieldScenario, p0: float, grid: QuadratureGrid, dS_T: float):
    w = _w(sample)
    p1 = p0 + w
    if np.any(p1 <= 0):
        raise StepRejected(f"p1 <= 0 on the grid during p0 advance (min {np.min(p1):.3e})")
    rho, V = sample.rho, sample.V
    dt_w = sample.dt_p - sample.dt_phi + (sample.dt_rho * sample.T + sample.rho * sample.dt_T) / scenario.m_ref
    grad_w = sample.grad_p - sample.grad_phi + (
        sample.grad_rho * sample.T[..., None] + sample.rho[..., None] * sample.grad_T
    ) / scenario.m_ref
    Dw = dt_w + np.sum(V * grad_w, axis=-1)
    S_p = -1.5 * grid.integrate(rho * Dw / p1) - 2.5 * grid.integrate(rho * sample.div_V)
    return (dS_T + S_p) / grid.integrate(1.5 * rho / p1)


def p0_rate(scenario: FieldScenario, t: float, p0: float, grid: QuadratureGrid) -> float:
    """dp0/dt from the entropy balance."""
    if scenario.stationary_p0:
        return 0.0
    sample = _grid_sample(scenario, t, grid)
    return _p0_rate(sample, scenario, p0, grid, _production(sample, scenario, grid))


@dataclass(frozen=True)
class P0Stage:
    t: float
    p0: float
    dp0_dt: float


@dataclass(frozen=True)
class PseudoPressureState:
    """p0(t) with its entropy ledger.

    ``stages`` holds the four RK4 stage values of the step that produced this
    state; particle integrators consume them so that (p0, particles) advance
    as one joint RK4 system.  ``history`` is shared between successive
    states and only ever appended to; ``hist_len`` is the length this state
    owns, so advancing an older state branches off a private copy.
    """

    t: float
    p0: float
    dp0_dt: float
    S_fM: float
    dS_T_dt: float
    history: list = field(default_factory=list, repr=False, compare=False)
    stages: tuple[P0Stage, ...] = ()
    stationary: bool = False
    hist_len: int = field(default=0, repr=False, compare=False)

    def _extended(self, row) -> list:
        history = self.history if len(self.history) == self.hist_len else self.history[: self.hist_len]
        history.append(row)
        return history

    def stages_for(self, t: float, dt: float) -> tuple[P0Stage, ...]:
        """RK4 stage values covering [t, t + dt]."""
        if self.stationary:
            return tuple(P0Stage(s, self.p0, 0.0) for s in (t, t + dt / 2, t + dt / 2, t + dt))
        if len(self.stages) == 4:
            span = max(abs(dt), 1.0)
            if abs(self.stages[0].t - t) <= 1e-12 * span and abs(self.stages[-1].t - (t + dt)) <= 1e-12 * span:
                return self.stages
        raise ConfigurationError(
            f"p0 state does not cover [{t}, {t + dt}]: advance p0 over the step before moving particles"
        )


def init_p0_state(
    scenario: FieldScenario, t0: float, grid: QuadratureGrid, p0: float | None = None
) -> PseudoPressureState:
    if p0 is None:
        p0 = solve_initial_p0(scenario, t0, grid)
    sample = _grid_sample(scenario, t0, grid)
    S = _entropy_from(sample, p0, grid)
    dS_T = _production(sample, scenario, grid)
    rate = 0.0 if scenario.stationary_p0 else _p0_rate(sample, scenario, p0, grid, dS_T)
    history = [(float(t0), float(p0), S, dS_T)]
    return PseudoPressureState(
        t=float(t0), p0=float(p0), dp0_dt=rate, S_fM=S, dS_T_dt=dS_T, history=history,
        stationary=scenario.stationary_p0, hist_len=1,
    )


def advance_p0(
    state: PseudoPressureState, scenario: FieldScenario, dt: float, grid: QuadratureGrid
) -> PseudoPressureState:
    """One classical RK4 step of the p0 ODE; raises StepRejected on positivity loss."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    t0, h = state.t, dt
    if state.stationary:
        t1 = t0 + h
        history = state._extended((t1, state.p0, state.S_fM, state.dS_T_dt))
        return replace(state, t=t1, stages=state.stages_for(t0, h), history=history, hist_len=len(history))

    cache: dict[float, tuple[FluidSample, float]] = {}

    def rate(t, p0):
        if t not in cache:
            sample = _grid_sample(scenario, t, grid)
            cache[t] = (sample, _production(sample, scenario, grid))
        sample, prod = cache[t]
        return _p0_rate(sample, scenario, p0, grid, prod)

    k1 = state.dp0_dt
    p2 = state.p0 + 0.5 * h * k1
    k2 = rate(t0 + 0.5 * h, p2)
    p3 = state.p0 + 0.5 * h * k2
    k3 = rate(t0 + 0.5 * h, p3)
    p4 = state.p0 + h * k3
    k4 = rate(t0 + h, p4)
    p_new = state.p0 + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    t1 = t0 + h
    sample = _grid_sample(scenario, t1, grid)
    try:
        S = _entropy_from(sample, p_new, grid)
    except PositivityError as exc:
        raise StepRejected(str(exc)) from exc
    dS_T = _production(sample, scenario, grid)
    new_rate = _p0_rate(sample, scenario, p_new, grid, dS_T)
    stages = (
        P0Stage(t0, state.p0, k1), P0Stage(t0 + 0.5 * h, p2, k2),
        P0Stage(t0 + 0.5 * h, p3, k3), P0Stage(t1, p4, k4),
    )
    history = state._extended((t1, p_new, S, dS_T))
    return replace(state, t=t1, p0=p_new, dp0_dt=new_rate, S_fM=S, dS_T_dt=dS_T, stages=stages, history=history,
                   hist_len=len(history))


def integrate_p0(
    state: PseudoPressureState, scenario: FieldScenario, t1: float, dt: float, grid: QuadratureGrid,
    min_dt: float = 1e-12,
) -> PseudoPressureState:
    """Advance to t1, halving the step whenever positivity would be lost."""
    while state.t < t1 - 1e-12 * max(1.0, abs(t1)):
        h = min(dt, t1 - state.t)
        while True:
            try:
                state = advance_p0(state, scenario, h, grid)
                break
            except StepRejected:
                h /= 2
                if h < min_dt:
                    raise
    return state


def write_ledger_csv(state: PseudoPressureState, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "p0", "S_fM", "dS_T_dt"])
        for row in state.history:
            out.writerow([repr(float(v)) for v in row])
