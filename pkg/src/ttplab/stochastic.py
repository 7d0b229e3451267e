"""Stochastic fields over hidden parameters alpha.

Every per-alpha computation calls the deterministic pipeline
(``kinetics``/``ttp``) on ``scenario.at_alpha(alpha)``, so a delta model
reproduces deterministic results exactly.  Averages over alpha come in two
flavours: Monte Carlo (equal weights on random draws) and tensor Gauss
quadrature on the model's own nodes (k <= 3).
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import hermite_e, legendre

from .errors import ConfigurationError, EstimationError, NumericalCheckError, TTPLabError
from .fields import FieldScenario, eval_sample
from .kinetics import (
    PseudoPressureState,
    QuadratureGrid,
    init_p0_state,
    kinetic_fields,
    quadrature_grid,
)
from .ensemble import f1m_density
from .ttp import ALIVE, RunResult, TTPBatch, TTPState, integrate_batch, orthonormal_frame, ttp_mean_field

KINDS = ("deterministic-delta", "uniform", "gaussian", "discrete")
_ALPHA_KEY = 3


@dataclass(frozen=True)
class StochasticModel:
    """Distribution g(alpha) of the hidden parameters.

    ``center``/``width`` are per component: the delta location, the uniform
    half-width or the gaussian standard deviation.  The ``discrete`` kind
    places mass ``weights`` on the rows of ``points``.
    """

    kind: str
    center: tuple
    width: tuple = ()
    points: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        width = tuple(float(w) for w in np.atleast_1d(self.width)) if len(np.atleast_1d(self.width)) else ()
        object.__setattr__(self, "width", width)
        if self.kind in ("uniform", "gaussian"):
            if len(width) != self.k or any(w <= 0 for w in width):
                raise ConfigurationError("uniform/gaussian models need a positive width per component")
        if self.kind == "discrete":
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            wts = np.asarray(self.weights, dtype=float)
            if pts.shape[1] != self.k or len(wts) != len(pts) or np.any(wts < 0):
                raise ConfigurationError("discrete model needs one non-negative weight per k-vector point")
            if abs(wts.sum() - 1.0) > 1e-12:
                raise ConfigurationError("discrete weights must sum to 1")
            object.__setattr__(self, "points", tuple(map(tuple, pts.tolist())))
            object.__setattr__(self, "weights", tuple(wts.tolist()))

    @property
    def k(self) -> int:
        return len(self.center)

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "deterministic-delta"

    def pdf(self, alpha) -> np.ndarray:
        """Density g(alpha); point masses (delta, discrete) return +inf on their support."""
        a = np.atleast_2d(np.asarray(alpha, dtype=float))
        c = np.asarray(self.center)
        if self.kind == "uniform":
            w = np.asarray(self.width)
            inside = np.all(np.abs(a - c) <= w, axis=1)
            return np.where(inside, 1.0 / np.prod(2 * w), 0.0)
        if self.kind == "gaussian":
            w = np.asarray(self.width)
            z = (a - c) / w
            return np.exp(-0.5 * np.sum(z * z, axis=1)) / np.prod(math.sqrt(2 * math.pi) * w)
        support = np.asarray(self.points) if self.kind == "discrete" else c[None, :]
        hit = np.any(np.all(a[:, None, :] == support[None, :, :], axis=2), axis=1)
        return np.where(hit, np.inf, 0.0)

    def normalization(self, order: int = 48) -> float:
        """Integral of g: tensor Gauss-Legendre over the support (+-12 sigma for gaussians)."""
        if self.kind == "deterministic-delta":
            return 1.0
        if self.kind == "discrete":
            return float(np.sum(self.weights))
        half = np.asarray(self.width) * (12.0 if self.kind == "gaussian" else 1.0)
        x, w = legendre.leggauss(order)
        total = 0.0
        for idx in itertools.product(range(order), repeat=self.k):
            a = np.asarray(self.center) + half * x[list(idx)]
            total += np.prod(w[list(idx)] * half) * float(self.pdf(a)[0])
        return total

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        c = np.asarray(self.center)
        if self.kind == "deterministic-delta":
            return np.tile(c, (m, 1))
        if self.kind == "uniform":
            return c + np.asarray(self.width) * (2.0 * rng.random((m, self.k)) - 1.0)
        if self.kind == "gaussian":
            return c + np.asarray(self.width) * rng.standard_normal((m, self.k))
        idx = rng.choice(len(self.weights), size=m, p=np.asarray(self.weights))
        return np.asarray(self.points)[idx]

    def quadrature(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        """Nodes (M, k) and weights (M,) with sum(weights * h(nodes)) = <h>_alpha."""
        c = np.asarray(self.center)
        if self.kind == "deterministic-delta":
            return c[None, :].copy(), np.ones(1)
        if self.kind == "discrete":
            return np.asarray(self.points), np.asarray(self.weights)
        if self.k > 3:
            raise ConfigurationError("quadrature averaging supports k <= 3")
        if self.kind == "gaussian":
            x, w = hermite_e.hermegauss(order)
            w = w / math.sqrt(2 * math.pi)
        else:
            x, w = legendre.leggauss(order)
            w = w / 2.0
        grids = list(itertools.product(range(order), repeat=self.k))
        nodes = np.array([[c[i] + self.width[i] * x[j] for i, j in enumerate(g)] for g in grids])
        weights = np.array([np.prod([w[j] for j in g]) for g in grids])
        return nodes, weights

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "center": list(self.center)}
        if self.width:
            d["width"] = list(self.width)
        if self.points:
            d["points"] = [list(p) for p in self.points]
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StochasticModel":
        unknown = set(d) - {"kind", "center", "width", "points", "weights"}
        if unknown:
            raise ConfigurationError(f"unknown model keys {sorted(unknown)}")
        if "kind" not in d or "center" not in d:
            raise ConfigurationError("model needs 'kind' and 'center'")
        return cls(d["kind"], tuple(d["center"]), tuple(d.get("width", ())), tuple(map(tuple, d.get("points", ()))),
                   tuple(d.get("weights", ())))


def alpha_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(_ALPHA_KEY,)))


def sample_alpha(model: StochasticModel, rng: np.random.Generator) -> np.ndarray:
    return model.sample(rng, 1)[0]


def alpha_set(model: StochasticModel, mode: str, m_alpha: int | None = None, seed: int = 0, order: int = 8):
    """Nodes and weights for either averaging mode."""
    if mode == "mc":
        if not m_alpha or m_alpha < 1:
            raise ConfigurationError("Monte-Carlo mode needs m_alpha >= 1")
        return model.sample(alpha_rng(seed), m_alpha), np.full(m_alpha, 1.0 / m_alpha)
    if mode == "quadrature":
        return model.quadrature(order)
    raise ConfigurationError(f"unknown averaging mode {mode!r}")


# ---------------------------------------------------------------------------
# decomposition


@dataclass
class Decomposition:
    mean: np.ndarray
    fluctuations: np.ndarray
    stderr: np.ndarray
    mode: str


def decompose(samples, model: StochasticModel | None = None, weights=None) -> Decomposition:
    """Split per-alpha values (axis 0) into the alpha-average and fluctuations.

    Without ``weights`` the average is the Monte-Carlo sample mean; with
    quadrature ``weights`` it is the weighted sum and the standard error is 0.
    """
    x = np.asarray(samples, dtype=float)
    if weights is None:
        if len(x) < 2 and not (model is not None and model.is_deterministic):
            raise EstimationError("Monte-Carlo decomposition needs at least two samples")
        # shifting by the first sample keeps constant inputs exactly constant
        mean = x[0] + (x - x[0]).mean(axis=0)
        se = x.std(axis=0, ddof=1) / math.sqrt(len(x)) if len(x) > 1 else np.zeros_like(mean)
        mode = "mc"
    else:
        w = np.asarray(weights, dtype=float)
        if len(w) != len(x):
            raise ConfigurationError("weights and samples differ in length")
        mean = x[0] + np.tensordot(w, x - x[0], axes=(0, 0)) / w.sum()
        se = np.zeros_like(mean)
        mode = "quadrature"
    return Decomposition(mean=mean, fluctuations=x - mean, stderr=se, mode=mode)


# ---------------------------------------------------------------------------
# Langevin runs


@dataclass(frozen=True)
class TTPSpec:
    """Initial TTP for stochastic runs: direction is rebuilt per alpha from the azimuth phi in the (e1, e2) frame of b."""

    r0: tuple
    beta: float
    phi: float = 0.0
    t0: float = 0.0

    def state(self, scenario: FieldScenario, p0: float, dp0_dt: float = 0.0) -> TTPState:
        r = np.asarray(self.r0, dtype=float)
        kf = kinetic_fields(eval_sample(scenario, r, self.t0), p0, scenario, dp0_dt)
        if not bool(kf.b_defined):
            raise ConfigurationError("grad p1_hat vanishes at r0: the TTP direction is undefined")
        e1, e2 = orthonormal_frame(kf.b)
        n = math.cos(self.phi) * e1 + math.sin(self.phi) * e2
        return TTPState(r=r, n=n, beta=float(self.beta), t=float(self.t0), tangency_defect=float(np.dot(n, kf.b)))


@dataclass
class Member:
    alpha: np.ndarray
    weight: float
    p0_initial: PseudoPressureState | None
    result: RunResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.result is not None and bool(self.result.batch.status[0] == ALIVE)


@dataclass
class LangevinBundle:
    scenario: FieldScenario
    spec: TTPSpec
    model: StochasticModel
    mode: str
    t1: float
    dt: float
    members: list

    @property
    def alphas(self) -> np.ndarray:
        return np.array([m.alpha for m in self.members])

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.members])

    @property
    def success_fraction(self) -> float:
        return float(np.mean([m.ok for m in self.members]))

    def summary(self) -> dict:
        rows = []
        for m in self.members:
            row = {"alpha": m.alpha.tolist(), "weight": m.weight, "ok": m.ok, "error": m.error}
            if m.result is not None:
                b = m.result.batch
                row.update(
                    p0_t0=m.p0_initial.p0, p0_t1=m.result.p0_state.p0, r=b.r[0].tolist(), n=b.n[0].tolist(),
                    beta=float(b.beta[0]), max_beta_drift=float(m.result.max_beta_drift[0]),
                )
            rows.append(row)
        return {"model": self.model.to_dict(), "mode": self.mode, "t1": self.t1, "dt": self.dt,
                "success_fraction": self.success_fraction, "members": rows}


def _run_member(scenario, spec, alpha, weight, n_steps, dt, grid, p0, record_every, backend):
    sc = scenario.at_alpha(alpha)
    try:
        state0 = init_p0_state(sc, spec.t0, grid, p0=p0)
        ttp0 = spec.state(sc, state0.p0, state0.dp0_dt)
        batch = TTPBatch.from_states([ttp0])
        res = integrate_batch(batch, sc, state0, n_steps, dt, grid, record_every=record_every, backend=backend,
                              threads=1)
        return Member(np.asarray(alpha, dtype=float), float(weight), state0, res)
    except TTPLabError as exc:
        return Member(np.asarray(alpha, dtype=float), float(weight), None, None, f"{type(exc).__name__}: {exc}")


def langevin_run(
    scenario: FieldScenario,
    spec: TTPSpec,
    model: StochasticModel,
    m_alpha: int | None,
    t1: float,
    dt: float,
    seed: int = 0,
    grid: QuadratureGrid | None = None,
    mode: str = "mc",
    order: int = 8,
    p0: float | None = None,
    record_every: int = 0,
    threads: int = 1,
    backend: str | None = None,
) -> LangevinBundle:
    """One deterministic TTP run per alpha (initial p0 from the entropy root unless ``p0`` is given)."""
    if model.k != len(scenario.alpha_hooks):
        raise ConfigurationError(f"model has {model.k} components, scenario declares {len(scenario.alpha_hooks)} hooks")
    n_steps = int(round((t1 - spec.t0) / dt))
    if dt <= 0 or n_steps < 0 or abs(n_steps * dt - (t1 - spec.t0)) > 1e-9 * max(1.0, abs(t1)):
        raise ConfigurationError("t1 - t0 must be a non-negative multiple of dt > 0")
    if grid is None:
        grid = quadrature_grid(scenario)
    alphas, weights = alpha_set(model, mode, m_alpha, seed, order)
    args = [(scenario, spec, a, w, n_steps, dt, grid, p0, record_every, backend) for a, w in zip(alphas, weights)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(lambda a: _run_member(*a), args))
    else:
        members = [_run_member(*a) for a in args]
    return LangevinBundle(scenario, spec, model, mode, float(t1), float(dt), members)


# ---------------------------------------------------------------------------
# field snapshots, Kramers-Moyal coefficients, ordering


@dataclass
class FieldSnapshots:
    """Per-alpha fields at one shared event, seen by a TTP with fixed (beta, phi)."""

    t: float
    r: np.ndarray
    alphas: np.ndarray
    weights: np.ndarray | None  # None: Monte-Carlo samples
    rho: np.ndarray
    V: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    v_th: np.ndarray
    u_th: np.ndarray
    F: np.ndarray


def field_snapshots(
    scenario: FieldScenario,
    alphas,
    p0s: Sequence[tuple[float, float]],
    r,
    t: float,
    beta: float,
    phi: float = 0.0,
    weights=None,
) -> FieldSnapshots:
    """Evaluate rho, V, p1, u_th and the TTP force for every alpha at the event (r, t)."""
    r = np.asarray(r, dtype=float)
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
    cols = {k: [] for k in ("rho", "V", "p0", "p1", "v_th", "u_th", "F")}
    for a, (p0, dp0) in zip(alphas, p0s):
        sc = scenario.at_alpha(a)
        sample = eval_sample(sc, r, t)
        kf = kinetic_fields(sample, p0, sc, dp0)
        e1, e2 = orthonormal_frame(kf.b)
        n = math.cos(phi) * e1 + math.sin(phi) * e2
        state = TTPState(r=r, n=n, beta=float(beta), t=float(t))
        cols["rho"].append(float(sample.rho))
        cols["V"].append(np.asarray(sample.V, dtype=float))
        cols["p0"].append(float(p0))
        cols["p1"].append(float(kf.p1))
        cols["v_th"].append(float(kf.v_th))
        cols["u_th"].append(beta * float(kf.v_th) * n)
        cols["F"].append(ttp_mean_field(sc, state, t, p0, dp0))
    w = None if weights is None else np.asarray(weights, dtype=float)
    return FieldSnapshots(float(t), r, alphas, w, **{k: np.array(v) for k, v in cols.items()})


def bundle_snapshots(bundle: LangevinBundle, r=None, when: str = "start") -> FieldSnapshots:
    """Snapshots at the bundle's initial event (default ``r = spec.r0``) or at ``t1`` with each member's final p0."""
    ok = [m for m in bundle.members if m.ok]
    if not ok:
        raise EstimationError("no successful bundle members")
    if when == "start":
        t = bundle.spec.t0
        p0s = [(m.p0_initial.p0, m.p0_initial.dp0_dt) for m in ok]
    elif when == "end":
        t = bundle.t1
        p0s = [(m.result.p0_state.p0, m.result.p0_state.dp0_dt) for m in ok]
    else:
        raise ConfigurationError("when must be 'start' or 'end'")
    r = bundle.spec.r0 if r is None else r
    w = None if bundle.mode == "mc" else np.array([m.weight for m in ok])
    return field_snapshots(bundle.scenario, [m.alpha for m in ok], p0s, r, t, bundle.spec.beta, bundle.spec.phi, w)


@dataclass
class KMTable:
    """C[(i, j, k)] = <dF (drho)^i (dp1)^j (du_th)^{(x)k}>_alpha / n!,  n = i + j + k.

    Each entry is an array of shape ``(3,) * (1 + k)``: axis 0 indexes dF,
    the remaining k axes index the successive du_th factors.
    """

    n_max: int
    entries: dict
    stderr: dict
    n_samples: int
    mode: str
    layout: str = "C[a, b1..bk] = < dF_a drho^i dp1^j du_b1 ... du_bk > / (i+j+k)!"

    def total_order(self, key) -> int:
        return 1 + sum(key)

    def to_dict(self) -> dict:
        def key(k):
            return f"{k[0]},{k[1]},{k[2]}"

        return {
            "n_max": self.n_max, "n_samples": self.n_samples, "mode": self.mode, "layout": self.layout,
            "entries": {key(k): {"shape": list(v.shape), "value": v.tolist(), "stderr": self.stderr[k].tolist()}
                        for k, v in sorted(self.entries.items())},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _km_product(dF, drho, dp1, du, i, j, k):
    out = dF * (drho**i * dp1**j)[:, None]
    for _ in range(k):
        out = out[..., None] * du.reshape((du.shape[0],) + (1,) * (out.ndim - 1) + (3,))
    return out


def kramers_moyal(snap: FieldSnapshots, n_max: int = 3, quad_order: int | None = None) -> KMTable:
    """Kramers-Moyal coefficients for every (i, j, k) with 2 <= i + j + k <= n_max."""
    if n_max < 2:
        raise ConfigurationError("n_max must be >= 2")
    M = len(snap.rho)
    if snap.weights is None:
        if M < 2 * (n_max + 1):
            raise EstimationError(f"{M} alpha samples are too few for order {n_max}")
    elif quad_order is not None and 2 * quad_order - 1 < (1 + n_max) * 2:
        raise EstimationError("quadrature order too low for the requested Kramers-Moyal order")
    parts = [decompose(x, weights=snap.weights).fluctuations for x in (snap.F, snap.rho, snap.p1, snap.u_th)]
    dF, drho, dp1, du = parts
    entries, errs = {}, {}
    for n in range(2, n_max + 1):
        for i in range(n + 1):
            for j in range(n + 1 - i):
                k = n - i - j
                prod = _km_product(dF, drho, dp1, du, i, j, k)
                d = decompose(prod, weights=snap.weights)
                entries[(i, j, k)] = d.mean / math.factorial(n)
                errs[(i, j, k)] = d.stderr / math.factorial(n)
    return KMTable(n_max, entries, errs, M, "mc" if snap.weights is None else "quadrature")


@dataclass
class OrderingReport:
    zeta_V: float
    zeta_p: float
    zeta_rho: float
    zeta_f: float
    p_excess: float
    stderr: dict

    def to_dict(self) -> dict:
        return {"zeta_V": self.zeta_V, "zeta_p": self.zeta_p, "zeta_rho": self.zeta_rho, "zeta_f": self.zeta_f,
                "p_excess": self.p_excess, "stderr": self.stderr}


def _ratio(num_samples, denom, weights):
    d = decompose(num_samples, weights=weights)
    scale = abs(float(denom))
    if scale == 0.0:
        return (0.0, 0.0) if np.all(np.asarray(num_samples) == 0) else (math.inf, math.inf)
    return float(d.mean) / scale, float(d.stderr) / scale


def ordering_report(snap: FieldSnapshots) -> OrderingReport:
    """Fluctuation-amplitude ratios (diagnostics only, no thresholds)."""
    w = snap.weights
    mean = lambda x: decompose(x, weights=w).mean  # noqa: E731
    dV = np.linalg.norm(decompose(snap.V, weights=w).fluctuations, axis=1)
    dp = np.abs(decompose(snap.p1, weights=w).fluctuations)
    drho = np.abs(decompose(snap.rho, weights=w).fluctuations)
    p0m = mean(snap.p0)
    # f_1M at the averaged thermal speed, per alpha
    u_ref = float(mean(snap.v_th))
    f = f1m_density(u_ref, snap.rho, snap.v_th)
    df = np.abs(decompose(f, weights=w).fluctuations)
    zV = _ratio(dV, np.linalg.norm(mean(snap.V)), w)
    zp = _ratio(dp, p0m, w)
    zr = _ratio(drho, mean(snap.rho), w)
    zf = _ratio(df, mean(f), w)
    pe = abs(float(mean(snap.p1)) - float(p0m)) / abs(float(p0m))
    return OrderingReport(zV[0], zp[0], zr[0], zf[0], pe,
                          {"zeta_V": zV[1], "zeta_p": zp[1], "zeta_rho": zr[1], "zeta_f": zf[1]})


# ---------------------------------------------------------------------------
# entropy inequality


@dataclass
class EntropyInequality:
    S_of_mean: float
    mean_of_S: float
    per_alpha: np.ndarray
    closed_form: np.ndarray
    tolerance: float
    p0: np.ndarray

    @property
    def gap(self) -> float:
        return self.S_of_mean - self.mean_of_S

    @property
    def holds(self) -> bool:
        return self.gap >= -self.tolerance

    def to_dict(self) -> dict:
        return {"S_of_mean": self.S_of_mean, "mean_of_S": self.mean_of_S, "gap": self.gap,
                "holds": self.holds, "tolerance": self.tolerance, "per_alpha": self.per_alpha.tolist(),
                "closed_form": self.closed_form.tolist(), "p0": self.p0.tolist()}


def _neg_f_log_f(f):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(f > 0, -f * np.log(np.where(f > 0, f, 1.0)), 0.0)


def conditional_entropy_closed_form(rho, p1, weights) -> float:
    """S(f_1M) = integral of rho [(3/2) ln p1 - (5/2) ln rho + (3/2)(1 + ln 2 pi) - ln 2]."""
    return float(np.sum(weights * rho * (1.5 * np.log(p1) - 2.5 * np.log(rho) + 1.5 * (1 + math.log(2 * math.pi))
                                         - math.log(2.0))))


def entropy_inequality_check(
    scenario: FieldScenario,
    model: StochasticModel,
    t: float,
    grid: QuadratureGrid | None = None,
    m_alpha: int | None = None,
    seed: int = 0,
    mode: str = "mc",
    order: int = 8,
    p0s: Sequence[float] | None = None,
    u_nodes: int = 96,
    tolerance: float = 1e-8,
) -> EntropyInequality:
    """Compare S(<f_1>_alpha) with <S(f_1)>_alpha by quadrature over (u, phi, r).

    Both sides are evaluated on the same nodes; the speed axis uses Gauss-Legendre
    on [0, 8 max v_th].  Unless ``p0s`` is given each alpha gets its own p0 from
    the entropy root at ``t``.
    """
    if grid is None:
        grid = quadrature_grid(scenario)
    alphas, weights = alpha_set(model, mode, m_alpha, seed, order)
    rho, p1, p0_used = [], [], []
    for idx, a in enumerate(alphas):
        sc = scenario.at_alpha(a)
        p0 = init_p0_state(sc, t, grid, p0=None if p0s is None else p0s[idx]).p0
        sample = eval_sample(sc, grid.nodes, t)
        kf = kinetic_fields(sample, p0, sc)
        rho.append(np.asarray(sample.rho, dtype=float) * np.ones(len(grid.weights)))
        p1.append(np.asarray(kf.p1, dtype=float))
        p0_used.append(p0)
    rho, p1 = np.array(rho), np.array(p1)
    v_th = np.sqrt(2.0 * p1 / rho)
    if not np.all(np.isfinite(v_th)):
        raise NumericalCheckError("non-finite thermal speed on the quadrature grid")
    x, wu = legendre.leggauss(u_nodes)
    u_max = 8.0 * float(v_th.max())
    u = 0.5 * u_max * (x + 1.0)
    wu = 0.5 * u_max * wu * u * u * 2.0 * math.pi  # includes u^2 and the phi integral
    f = f1m_density(u[None, None, :], rho[:, :, None], v_th[:, :, None])  # (M, G, U)
    per_alpha = np.einsum("agu,g,u->a", _neg_f_log_f(f), grid.weights, wu)
    fbar = np.tensordot(weights, f, axes=(0, 0))
    S_of_mean = float(np.einsum("gu,g,u->", _neg_f_log_f(fbar), grid.weights, wu))
    mean_of_S = float(np.dot(weights, per_alpha))
    closed = np.array([conditional_entropy_closed_form(rho[a], p1[a], grid.weights) for a in range(len(alphas))])
    return EntropyInequality(S_of_mean, mean_of_S, per_alpha, closed, tolerance, np.array(p0_used))
