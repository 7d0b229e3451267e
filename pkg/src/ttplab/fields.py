"""Analytic thermofluid scenarios with closed-form derivatives.

Every scenario is written once as a set of sympy expressions for
(rho, V, p, T, phi, f).  All space/time derivatives are obtained by symbolic
differentiation and compiled to vectorized numpy code, so the values returned
by :func:`eval_sample` are exact up to floating point.  :func:`fd_check`
compares them against central differences as a guard.

Shipped scenarios
-----------------
uniform
    Constant fields.
rigid-rotation
    ``V = omega z_hat x r`` with the centrifugal pressure; steady INSE solution.
taylor-green
    Decaying 2D Taylor-Green vortex; exact unsteady INSE solution.
manufactured-compressible
    Travelling density wave with a velocity that satisfies continuity exactly.
    The body force balances momentum and an external heating term closes the
    Fourier equation.

In every scenario the external heating ``q_ext`` is the power density that
makes the temperature equation hold.  Isothermal scenarios therefore carry
``q_ext`` equal to minus the viscous dissipation, so that ``K = 0``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from .errors import (
    ConfigurationError,
    DomainError,
    InvalidSampleError,
    SingularityError,
)

X, Y, Z = sp.symbols("x y z", real=True)
TIME = sp.Symbol("t", real=True)
COORDS = (X, Y, Z)

COEFFICIENTS = ("mu", "lam", "k_cond", "c_p", "alpha_coef", "beta_T", "m_ref")
_COEF_DEFAULTS = dict(mu=1e-2, lam=0.0, k_cond=0.0, c_p=2.5, alpha_coef=0.0, beta_T=0.0, m_ref=1.0)
_REL_DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]`` in R^3."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ConfigurationError("box corners must be 3-vectors")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ConfigurationError(f"box has non-positive volume: {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def scale(self) -> float:
        return float(np.max(np.subtract(self.hi, self.lo)))

    def contains(self, r, tol: float = 0.0) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        pad = tol * np.subtract(self.hi, self.lo)
        return np.all((r >= np.asarray(self.lo) - pad) & (r <= np.asarray(self.hi) + pad), axis=-1)

    def issubset(self, other: "Box") -> bool:
        return all(a >= b for a, b in zip(self.lo, other.lo)) and all(
            a <= b for a, b in zip(self.hi, other.hi)
        )


@dataclass(frozen=True)
class AlphaHook:
    """Map one hidden parameter alpha_i onto a scenario parameter.

    ``relative``: param -> param * (1 + amplitude * alpha_i)
    ``absolute``: param -> param + amplitude * alpha_i
    """

    param: str
    amplitude: float
    mode: str = "relative"

    def __post_init__(self):
        if self.mode not in ("relative", "absolute"):
            raise ConfigurationError(f"unknown alpha hook mode {self.mode!r}")


# ---------------------------------------------------------------------------
# scenario definitions (symbolic)


def _uniform(P):
    return dict(
        rho=P["rho"], V=(P["Vx"], P["Vy"], P["Vz"]), p=P["p"], T=P["T"], phi=0, f=(0, 0, 0)
    )


def _rigid_rotation(P):
    w = P["omega"]
    return dict(
        rho=P["rho0"],
        V=(-w * Y, w * X, 0),
        p=P["p_ref"] + P["rho0"] * w**2 * (X**2 + Y**2) / 2,
        T=P["T0"],
        phi=0,
        f=(0, 0, 0),
    )


def _taylor_green(P):
    k, U, rho = P["k"], P["U0"], P["rho0"]
    nu = P["mu"] / rho
    F = sp.exp(-2 * nu * k**2 * TIME)
    return dict(
        rho=rho,
        V=(U * sp.sin(k * X) * sp.cos(k * Y) * F, -U * sp.cos(k * X) * sp.sin(k * Y) * F, 0),
        p=P["p_ref"] + rho * U**2 / 4 * (sp.cos(2 * k * X) + sp.cos(2 * k * Y)) * F**2,
        T=P["T0"],
        phi=0,
        f=(0, 0, 0),
    )


def _manufactured(P):
    k, c, eps = P["k"], P["c"], P["eps"]
    psi = k * (X - c * TIME)
    wave = 1 + eps * sp.sin(psi)
    return dict(
        rho=P["rho0"] * (1 + P["g_y"] * Y**2) * wave,
        V=(c * (1 - 1 / wave), 0, 0),
        p=P["p_ref"] + P["p_amp"] * sp.cos(psi) * (1 + Y / 2) + P["p_z"] * Z**2,
        T=P["T0"] + P["T_rate"] * TIME + P["T_amp"] * sp.sin(psi) * sp.cos(Y),
        phi=P["phi_grad"] * Z,
        f=None,  # balancing force
    )


@dataclass(frozen=True)
class _Spec:
    builder: Callable
    defaults: dict
    domain: Callable[[dict], Box]
    t_span: tuple[float, float]
    reference: Callable[[Box], np.ndarray]


def _center(box):
    return box.center


_REGISTRY: dict[str, _Spec] = {
    "uniform": _Spec(
        _uniform,
        dict(rho=1.0, Vx=1.0, Vy=0.0, Vz=0.0, p=0.0, T=0.0, mu=1e-3),
        lambda P: Box((0, 0, 0), (1, 1, 1)),
        (0.0, 100.0),
        _center,
    ),
    "rigid-rotation": _Spec(
        _rigid_rotation,
        dict(rho0=1.0, omega=2.0, p_ref=0.0, T0=0.0, half_width=2.0, half_height=1000.0, mu=1e-3),
        lambda P: Box(
            (-P["half_width"], -P["half_width"], -P["half_height"]),
            (P["half_width"], P["half_width"], P["half_height"]),
        ),
        (0.0, 1000.0),
        lambda box: np.array([0.0, 0.0, box.center[2]]),
    ),
    "taylor-green": _Spec(
        _taylor_green,
        dict(rho0=100.0, U0=1.0, k=1.0, p_ref=50.0, T0=0.0, mu=1.0),
        lambda P: Box((0, 0, 0), (2 * np.pi / P["k"], 2 * np.pi / P["k"], 1.0)),
        (0.0, 100.0),
        _center,
    ),
    "manufactured-compressible": _Spec(
        _manufactured,
        dict(
            rho0=100.0, eps=0.2, k=1.0, c=0.5, g_y=0.3, p_ref=2.0, p_amp=0.1, p_z=0.1,
            T0=1.0, T_rate=0.5, T_amp=0.1, phi_grad=0.2,
            mu=0.05, lam=0.02, k_cond=0.1, c_p=2.5, alpha_coef=0.01, beta_T=0.05,
        ),
        lambda P: Box((0, -1, -1), (2 * np.pi / P["k"], 1, 1)),
        (0.0, 10.0),
        lambda box: np.array([box.center[0], box.center[1], 0.0]),
    ),
}

SCENARIO_IDS = tuple(_REGISTRY)


# ---------------------------------------------------------------------------
# symbolic derivation and compilation

_FULL_LAYOUT = (
    # name, shape
    ("rho", ()), ("n", ()), ("V", (3,)), ("p", ()), ("T", ()), ("phi", ()), ("f_body", (3,)),
    ("q_ext", ()),
    ("grad_rho", (3,)), ("grad_p", (3,)), ("grad_T", (3,)), ("grad_phi", (3,)),
    ("grad_V", (3, 3)), ("hess_p1_part", (3, 3)),
    ("dt_rho", ()), ("dt_p", ()), ("dt_T", ()), ("dt_phi", ()), ("dt_V", (3,)),
    ("lap_V", (3,)), ("div_V", ()), ("grad_div_V", (3,)), ("lap_T", ()),
    ("q", ()), ("grad_q", (3,)), ("dt_q", ()), ("dt_grad_q", (3,)),
    ("s", ()), ("grad_s", (3,)), ("hess_s", (3, 3)), ("dt_s", ()), ("dt_grad_s", (3,)),
)
_KIN_NAMES = (
    "V", "grad_V", "q", "grad_q", "hess_p1_part", "dt_q", "dt_grad_q",
    "s", "grad_s", "hess_s", "dt_s", "dt_grad_s",
)
_LAYOUT = dict(_FULL_LAYOUT)


def _offsets(names):
    out, i = {}, 0
    for name in names:
        out[name] = i
        shape = _LAYOUT[name]
        i += int(np.prod(shape)) if shape else 1
    return out


KIN_OFFSETS = _offsets(_KIN_NAMES)
KIN_SIZE = sum(int(np.prod(_LAYOUT[n])) if _LAYOUT[n] else 1 for n in _KIN_NAMES)


def _grad(e):
    return [sp.diff(e, c) for c in COORDS]


def _hess(e):
    return [[sp.diff(e, a, b) for b in COORDS] for a in COORDS]


def _flatten(value, shape):
    if shape == ():
        return [value]
    if shape == (3,):
        return list(value)
    return [value[i][j] for i in range(3) for j in range(3)]


def _rational(v: float):
    return sp.nsimplify(float(v), rational=True)


def _scalar_source(exprs, alpha_syms, name: str) -> str:
    """Python source of ``name(x, y, z, t, alpha, out)`` writing each expression into ``out``."""
    from sympy.printing.pycode import PythonCodePrinter

    printer = PythonCodePrinter({"fully_qualified_modules": True})
    reps, reduced = sp.cse(exprs, symbols=sp.numbered_symbols("_c"))
    lines = [f"def {name}(x, y, z, t, alpha, out):"]
    lines += [f"    {a} = alpha[{i}]" for i, a in enumerate(alpha_syms)]
    lines += [f"    {sym} = {printer.doprint(e)}" for sym, e in reps]
    lines += [f"    out[{i}] = {printer.doprint(e)}" for i, e in enumerate(reduced)]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class _Compiled:
    full: Callable
    kin: Callable
    kin_source: str
    alpha_syms: tuple
    isothermal: bool
    stationary_p0: bool
    coordinate_dependence: tuple[bool, bool, bool]
    exprs: dict


def _derive(fields_: dict, coefs: dict) -> dict:
    rho = sp.sympify(fields_["rho"])
    V = [sp.sympify(v) for v in fields_["V"]]
    p = sp.sympify(fields_["p"])
    T = sp.sympify(fields_["T"])
    phi = sp.sympify(fields_["phi"])
    mu, lam, k_cond = coefs["mu"], coefs["lam"], coefs["k_cond"]
    c_p, a_T, b_T, m_ref = coefs["c_p"], coefs["alpha_coef"], coefs["beta_T"], coefs["m_ref"]

    n = rho / m_ref
    grad_V = [[sp.diff(V[j], COORDS[i]) for j in range(3)] for i in range(3)]
    div_V = sum(grad_V[i][i] for i in range(3))
    lap_V = [sum(sp.diff(V[j], c, 2) for c in COORDS) for j in range(3)]
    grad_div_V = _grad(div_V)
    dt_V = [sp.diff(v, TIME) for v in V]
    adv_V = [sum(V[i] * grad_V[i][j] for i in range(3)) for j in range(3)]
    div_sigma = [mu * lap_V[j] + (mu / 3 + lam) * grad_div_V[j] for j in range(3)]
    grad_p = _grad(p)
    if fields_["f"] is None:
        f = [rho * (dt_V[j] + adv_V[j]) + grad_p[j] - div_sigma[j] for j in range(3)]
    else:
        f = [sp.sympify(v) for v in fields_["f"]]

    strain = [
        [grad_V[i][k] + grad_V[k][i] - (sp.Rational(2, 3) * div_V if i == k else 0) for k in range(3)]
        for i in range(3)
    ]
    dissipation = mu / 2 * sum(strain[i][k] ** 2 for i in range(3) for k in range(3)) + lam * div_V**2
    lap_T = sum(sp.diff(T, c, 2) for c in COORDS)
    Dp = sp.diff(p, TIME) + sum(V[i] * grad_p[i] for i in range(3))
    DT = sp.diff(T, TIME) + sum(V[i] * sp.diff(T, COORDS[i]) for i in range(3))
    core = (
        -sum(V[i] * f[i] for i in range(3))
        - (b_T * n - a_T * T) * Dp
        - p * div_V
        + dissipation
        + k_cond * lap_T
    )
    q_ext = (n * c_p - a_T * p) * DT - core

    w = p - phi + n * T
    q = w / rho
    s = 1 / rho
    return dict(
        rho=rho, n=n, V=V, p=p, T=T, phi=phi, f_body=f, q_ext=q_ext,
        grad_rho=_grad(rho), grad_p=grad_p, grad_T=_grad(T), grad_phi=_grad(phi),
        grad_V=grad_V, hess_p1_part=_hess(q),
        dt_rho=sp.diff(rho, TIME), dt_p=sp.diff(p, TIME), dt_T=sp.diff(T, TIME),
        dt_phi=sp.diff(phi, TIME), dt_V=dt_V,
        lap_V=lap_V, div_V=div_V, grad_div_V=grad_div_V, lap_T=lap_T,
        q=q, grad_q=_grad(q), dt_q=sp.diff(q, TIME), dt_grad_q=[sp.diff(g, TIME) for g in _grad(q)],
        s=s, grad_s=_grad(s), hess_s=_hess(s), dt_s=sp.diff(s, TIME),
        dt_grad_s=[sp.diff(g, TIME) for g in _grad(s)],
        # used only for the stationarity test
        _w=w, _dissipation=dissipation,
    )


def _is_zero(expr) -> bool:
    expr = sp.sympify(expr)
    if expr == 0:
        return True
    return sp.simplify(sp.expand(expr)) == 0


@lru_cache(maxsize=64)
def _compile(scenario_id: str, params: tuple, hooks: tuple) -> _Compiled:
    spec = _REGISTRY[scenario_id]
    alpha_syms = tuple(sp.Symbol(f"alpha_{i}", real=True) for i in range(len(hooks)))
    P = {name: _rational(v) for name, v in params}
    for a, h in zip(alpha_syms, hooks):
        amp = _rational(h.amplitude)
        P[h.param] = P[h.param] * (1 + amp * a) if h.mode == "relative" else P[h.param] + amp * a
    coefs = {c: P[c] for c in COEFFICIENTS}
    ex = _derive(spec.builder(P), coefs)

    args = (X, Y, Z, TIME) + alpha_syms
    full_list = [e for name, shape in _FULL_LAYOUT for e in _flatten(ex[name], shape)]
    kin_list = [e for name in _KIN_NAMES for e in _flatten(ex[name], _LAYOUT[name])]
    full = sp.lambdify(args, full_list, modules="numpy", cse=True)
    kin = sp.lambdify(args, kin_list, modules="numpy", cse=True)

    primary = [ex["rho"], ex["p"], ex["T"], ex["phi"], *ex["V"], *ex["f_body"], ex["q_ext"]]
    free = set().union(*(sp.sympify(e).free_symbols for e in primary))
    isothermal = not (ex["T"].free_symbols & {X, Y, Z, TIME})
    stationary = TIME not in free
    if stationary:
        Dw = sum(ex["V"][i] * sp.diff(ex["_w"], COORDS[i]) for i in range(3))
        stationary = _is_zero(ex["div_V"]) and _is_zero(Dw)
        if stationary and not isothermal:
            # entropy production density numerator (see kinetics)
            num = (-sum(ex["V"][i] * ex["f_body"][i] for i in range(3)) + ex["q_ext"]) * ex["T"]
            num += coefs["k_cond"] * sum(g**2 for g in ex["grad_T"]) + ex["_dissipation"] * ex["T"]
            stationary = _is_zero(num)
    return _Compiled(
        full=full,
        kin=kin,
        kin_source=_scalar_source(kin_list, alpha_syms, "kin"),
        alpha_syms=alpha_syms,
        isothermal=bool(isothermal),
        stationary_p0=bool(stationary),
        coordinate_dependence=tuple(c in free for c in COORDS),
        exprs=ex,
    )


def _unpack(values, names, batch_shape):
    buf = np.empty((len(values),) + batch_shape)
    for i, v in enumerate(values):
        buf[i] = v
    out = {}
    i = 0
    for name in names:
        shape = _LAYOUT[name]
        size = int(np.prod(shape)) if shape else 1
        if shape == ():
            out[name] = buf[i]
        else:
            out[name] = np.moveaxis(buf[i : i + size], 0, -1).reshape(batch_shape + shape)
        i += size
    return out


# ---------------------------------------------------------------------------
# public types


@dataclass(frozen=True)
class FieldScenario:
    """An analytic thermofluid scenario.

    Build one with :func:`build_scenario` or :func:`load_scenario`.  ``alpha``
    holds the current values of the hidden stochastic parameters (one per
    hook); :meth:`at_alpha` returns a copy bound to other values.
    """

    id: str
    params: tuple[tuple[str, float], ...]
    domain: Box
    t_span: tuple[float, float]
    alpha_hooks: tuple[AlphaHook, ...] = ()
    alpha: tuple[float, ...] = ()
    reference_point: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _compiled: _Compiled | None = field(default=None, repr=False, compare=False)

    def param(self, name: str) -> float:
        return dict(self.params)[name]

    @property
    def mu(self) -> float:
        return self.param("mu")

    @property
    def lam(self) -> float:
        return self.param("lam")

    @property
    def k_cond(self) -> float:
        return self.param("k_cond")

    @property
    def c_p(self) -> float:
        return self.param("c_p")

    @property
    def alpha_coef(self) -> float:
        return self.param("alpha_coef")

    @property
    def beta_T(self) -> float:
        return self.param("beta_T")

    @property
    def m_ref(self) -> float:
        return self.param("m_ref")

    @property
    def isothermal(self) -> bool:
        return self._compiled.isothermal

    @property
    def stationary_p0(self) -> bool:
        """True when dp0/dt vanishes identically (steady fields with zero S_p and entropy production)."""
        return self._compiled.stationary_p0

    @property
    def coordinate_dependence(self) -> tuple[bool, bool, bool]:
        return self._compiled.coordinate_dependence

    def at_alpha(self, alpha: Sequence[float]) -> "FieldScenario":
        alpha = tuple(float(a) for a in alpha)
        if len(alpha) != len(self.alpha_hooks):
            raise ConfigurationError(
                f"alpha has {len(alpha)} components, scenario declares {len(self.alpha_hooks)} hooks"
            )
        return replace(self, alpha=alpha)

    def check_event(self, r, t, tol: float = _REL_DOMAIN_TOL) -> None:
        if not np.all(self.domain.contains(r, tol)):
            raise DomainError(f"r outside scenario domain {self.domain}")
        t0, t1 = self.t_span
        if not (t0 - tol * (t1 - t0) <= t <= t1 + tol * (t1 - t0)):
            raise DomainError(f"t={t} outside t_span {self.t_span}")

    def _args(self, r, t, alpha):
        alpha = self.alpha if alpha is None else tuple(alpha)
        if len(alpha) != len(self.alpha_hooks):
            raise ConfigurationError(
                f"alpha has {len(alpha)} components, scenario declares {len(self.alpha_hooks)} hooks"
            )
        r = np.asarray(r, dtype=float)
        return r, (r[..., 0], r[..., 1], r[..., 2], float(t)) + alpha

    def kinematics(self, r, t, alpha=None) -> dict:
        """Reduced evaluation used by the particle integrators (no domain check)."""
        r, args = self._args(r, t, alpha)
        return _unpack(self._compiled.kin(*args), _KIN_NAMES, r.shape[:-1])


def build_scenario(
    scenario_id: str,
    params: Mapping[str, float] | None = None,
    domain: Box | None = None,
    t_span: Sequence[float] | None = None,
    alpha_hooks: Sequence[AlphaHook | Mapping] = (),
) -> FieldScenario:
    if scenario_id not in _REGISTRY:
        raise ConfigurationError(f"unknown scenario {scenario_id!r}; known: {', '.join(SCENARIO_IDS)}")
    spec = _REGISTRY[scenario_id]
    merged = dict(_COEF_DEFAULTS)
    merged.update(spec.defaults)
    for key, value in (params or {}).items():
        if key not in merged:
            raise ConfigurationError(f"unknown parameter {key!r} for scenario {scenario_id!r}")
        merged[key] = float(value)
    if merged["mu"] <= 0 or merged["lam"] < 0 or merged["k_cond"] < 0 or merged["m_ref"] <= 0:
        raise ConfigurationError("require mu > 0, lam >= 0, k_cond >= 0, m_ref > 0")
    if scenario_id == "taylor-green" and merged["p_ref"] < merged["rho0"] * merged["U0"] ** 2 / 2:
        raise ConfigurationError("taylor-green needs p_ref >= rho0*U0^2/2 so that p >= 0")

    hooks = tuple(h if isinstance(h, AlphaHook) else AlphaHook(**h) for h in alpha_hooks)
    for h in hooks:
        if h.param not in merged:
            raise ConfigurationError(f"alpha hook targets unknown parameter {h.param!r}")
        if h.param in COEFFICIENTS:
            raise ConfigurationError(f"alpha hooks may not target transport coefficient {h.param!r}")

    box = domain if domain is not None else spec.domain(merged)
    ts = tuple(float(v) for v in (t_span if t_span is not None else spec.t_span))
    if len(ts) != 2 or not ts[1] > ts[0]:
        raise ConfigurationError(f"t_span must be [t0, t1] with t1 > t0, got {ts}")
    key = tuple(sorted(merged.items()))
    compiled = _compile(scenario_id, key, hooks)
    return FieldScenario(
        id=scenario_id,
        params=key,
        domain=box,
        t_span=ts,
        alpha_hooks=hooks,
        alpha=(0.0,) * len(hooks),
        reference_point=tuple(float(v) for v in spec.reference(box)),
        _compiled=compiled,
    )


def scenario_from_dict(doc: Mapping) -> FieldScenario:
    """Build a scenario from the JSON document layout.

    ``{id, params{...}, domain{min:[x,y,z], max:[x,y,z]}, t_span:[t0,t1],
    alpha_hooks:[{param, amplitude[, mode]}]}``; everything but ``id`` is optional.
    """
    if not isinstance(doc, Mapping) or "id" not in doc:
        raise ConfigurationError("scenario document needs an 'id'")
    unknown = set(doc) - {"id", "params", "domain", "t_span", "alpha_hooks"}
    if unknown:
        raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
    domain = None
    if "domain" in doc:
        try:
            domain = Box(tuple(doc["domain"]["min"]), tuple(doc["domain"]["max"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad domain specification: {exc}") from exc
    try:
        hooks = [AlphaHook(**h) for h in doc.get("alpha_hooks", [])]
    except TypeError as exc:
        raise ConfigurationError(f"bad alpha hook: {exc}") from exc
    return build_scenario(
        doc["id"], doc.get("params"), domain=domain, t_span=doc.get("t_span"), alpha_hooks=hooks
    )


def load_scenario(path: str | Path) -> FieldScenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def scenario_to_dict(scenario: FieldScenario) -> dict:
    return {
        "id": scenario.id,
        "params": dict(scenario.params),
        "domain": {"min": list(scenario.domain.lo), "max": list(scenario.domain.hi)},
        "t_span": list(scenario.t_span),
        "alpha_hooks": [
            {"param": h.param, "amplitude": h.amplitude, "mode": h.mode} for h in scenario.alpha_hooks
        ],
    }


@dataclass(frozen=True)
class FluidSample:
    """Fluid fields and their analytic derivatives at one event, or a batch of events.

    Leading axes are batch axes.  ``grad_V[..., i, j]`` is d V_j / d r_i.
    ``hess_p1_part`` is the Hessian of ``q = (p - phi + n T) / rho``; together
    with ``s = 1/rho`` it builds every derivative of the specific kinetic
    pressure ``p1_hat = q + p0 s``.
    """

    rho: np.ndarray
    n: np.ndarray
    V: np.ndarray
    p: np.ndarray
    T: np.ndarray
    phi: np.ndarray
    f_body: np.ndarray
    q_ext: np.ndarray
    grad_rho: np.ndarray
    grad_p: np.ndarray
    grad_T: np.ndarray
    grad_phi: np.ndarray
    grad_V: np.ndarray
    hess_p1_part: np.ndarray
    dt_rho: np.ndarray
    dt_p: np.ndarray
    dt_T: np.ndarray
    dt_phi: np.ndarray
    dt_V: np.ndarray
    lap_V: np.ndarray
    div_V: np.ndarray
    grad_div_V: np.ndarray
    lap_T: np.ndarray
    q: np.ndarray
    grad_q: np.ndarray
    dt_q: np.ndarray
    dt_grad_q: np.ndarray
    s: np.ndarray
    grad_s: np.ndarray
    hess_s: np.ndarray
    dt_s: np.ndarray
    dt_grad_s: np.ndarray


def eval_sample(scenario: FieldScenario, r, t: float, alpha: Sequence[float] | None = None) -> FluidSample:
    """Evaluate all fields and derivatives at ``r`` (shape ``(3,)`` or ``(..., 3)``) and time ``t``."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1:] != (3,):
        raise ConfigurationError(f"r must have trailing dimension 3, got shape {r.shape}")
    scenario.check_event(r, t)
    r, args = scenario._args(r, t, alpha)
    values = _unpack(scenario._compiled.full(*args), [n for n, _ in _FULL_LAYOUT], r.shape[:-1])
    return FluidSample(**values)


def vorticity(sample: FluidSample) -> np.ndarray:
    G = sample.grad_V
    return np.stack(
        [G[..., 1, 2] - G[..., 2, 1], G[..., 2, 0] - G[..., 0, 2], G[..., 0, 1] - G[..., 1, 0]], axis=-1
    )


def viscous_divergence(sample: FluidSample, scenario: FieldScenario) -> np.ndarray:
    """div(sigma') for constant mu and lambda."""
    mu, lam = scenario.mu, scenario.lam
    return mu * sample.lap_V + (mu / 3 + lam) * sample.grad_div_V


def ns_acceleration(sample: FluidSample, scenario: FieldScenario) -> np.ndarray:
    """Navier-Stokes acceleration F_H = -(grad p - f)/rho + div(sigma')/rho."""
    rho = np.asarray(sample.rho)
    if np.any(rho <= 0):
        raise InvalidSampleError("rho must be positive")
    rho = rho[..., None]
    return -(sample.grad_p - sample.f_body) / rho + viscous_divergence(sample, scenario) / rho


def viscous_dissipation(sample: FluidSample, scenario: FieldScenario) -> np.ndarray:
    G = sample.grad_V
    div = sample.div_V
    S = G + np.swapaxes(G, -1, -2) - (2.0 / 3.0) * div[..., None, None] * np.eye(3)
    return 0.5 * scenario.mu * np.sum(S * S, axis=(-1, -2)) + scenario.lam * div**2


def heat_source(sample: FluidSample, scenario: FieldScenario) -> np.ndarray:
    """Heat production rate K(r, t), including the external heating q_ext in n J_T."""
    n, p, T = sample.n, sample.p, sample.T
    denom = n * scenario.c_p - scenario.alpha_coef * p
    if np.any(np.abs(denom) <= 1e-300) or np.any(np.abs(denom) < 1e-14 * np.abs(n * scenario.c_p)):
        raise SingularityError("degenerate heat capacity n(c_p - alpha p / n)")
    V = sample.V
    nJ = -np.sum(V * sample.f_body, axis=-1) + sample.q_ext
    Dp = sample.dt_p + np.sum(V * sample.grad_p, axis=-1)
    num = (
        nJ
        - (scenario.beta_T * n - scenario.alpha_coef * T) * Dp
        - p * sample.div_V
        + viscous_dissipation(sample, scenario)
        + scenario.k_cond * sample.lap_T
    )
    return num / denom


@dataclass(frozen=True)
class Residuals:
    continuity: np.ndarray
    momentum: np.ndarray
    fourier: np.ndarray

    def max_norm(self) -> float:
        return float(
            max(
                np.max(np.abs(self.continuity)),
                np.max(np.abs(self.momentum)),
                np.max(np.abs(self.fourier)),
            )
        )


def residuals(scenario: FieldScenario, r, t: float, alpha=None) -> Residuals:
    """Residuals of continuity, momentum and Fourier equations from analytic derivatives."""
    s = eval_sample(scenario, r, t, alpha)
    V = s.V
    continuity = s.dt_rho + np.sum(V * s.grad_rho, axis=-1) + s.rho * s.div_V
    DV = s.dt_V + np.einsum("...i,...ij->...j", V, s.grad_V)
    momentum = DV - ns_acceleration(s, scenario)
    fourier = s.dt_T + np.sum(V * s.grad_T, axis=-1) - heat_source(s, scenario)
    return Residuals(continuity, momentum, fourier)


def spacetime_lattice(scenario: FieldScenario, n_space: int = 5, n_time: int = 5):
    """Tensor lattice of ``n_space**3`` points (closed box) and ``n_time`` times spanning t_span."""
    axes = [np.linspace(lo, hi, n_space) for lo, hi in zip(scenario.domain.lo, scenario.domain.hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts, np.linspace(scenario.t_span[0], scenario.t_span[1], n_time)


def residual_sweep(scenario: FieldScenario, n_space: int = 5, n_time: int = 5) -> dict:
    """Maximum absolute residual of each balance law over the spacetime lattice."""
    pts, times = spacetime_lattice(scenario, n_space, n_time)
    worst = {"continuity": 0.0, "momentum": 0.0, "fourier": 0.0}
    for t in times:
        res = residuals(scenario, pts, float(t))
        for name in worst:
            worst[name] = max(worst[name], float(np.max(np.abs(getattr(res, name)))))
    return worst


# ---------------------------------------------------------------------------
# finite-difference guard

# (analytic derivative, field it differentiates, kind)
_FD_SPATIAL_FIRST = (
    ("grad_rho", "rho"), ("grad_p", "p"), ("grad_T", "T"), ("grad_phi", "phi"),
    ("grad_V", "V"), ("grad_q", "q"), ("grad_s", "s"), ("grad_div_V", "div_V"),
    ("hess_p1_part", "grad_q"), ("hess_s", "grad_s"),
)
_FD_TIME = (
    ("dt_rho", "rho"), ("dt_p", "p"), ("dt_T", "T"), ("dt_phi", "phi"), ("dt_V", "V"),
    ("dt_q", "q"), ("dt_s", "s"), ("dt_grad_q", "grad_q"), ("dt_grad_s", "grad_s"),
)


def _deviation(analytic, approx) -> float:
    analytic = np.asarray(analytic)
    return float(np.max(np.abs(analytic - approx) / (1.0 + np.abs(analytic))))


def fd_check(scenario: FieldScenario, r, t: float, h: float, alpha=None, detail: bool = False):
    """Worst mixed relative deviation between analytic derivatives and central differences.

    Spatial stencils use ``r +- h e_i`` and the time stencil ``t +- h``.  Second
    derivatives are differenced from the analytic first derivatives.  The
    deviation of each entry is ``|a - fd| / (1 + |a|)``.
    """
    if h <= 0:
        raise ConfigurationError("h must be positive")
    r = np.asarray(r, dtype=float)
    center = eval_sample(scenario, r, t, alpha)
    shifted = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        shifted.append((eval_sample(scenario, r + e, t, alpha), eval_sample(scenario, r - e, t, alpha)))
    later, earlier = eval_sample(scenario, r, t + h, alpha), eval_sample(scenario, r, t - h, alpha)

    report = {}
    for name, base in _FD_SPATIAL_FIRST:
        fd = np.stack(
            [(getattr(plus, base) - getattr(minus, base)) / (2 * h) for plus, minus in shifted], axis=0
        )
        report[name] = _deviation(getattr(center, name), fd)
    for name, base in _FD_TIME:
        fd = (getattr(later, base) - getattr(earlier, base)) / (2 * h)
        report[name] = _deviation(getattr(center, name), fd)
    # contractions of second derivatives
    lap_V = sum((plus.grad_V[i] - minus.grad_V[i]) / (2 * h) for i, (plus, minus) in enumerate(shifted))
    report["lap_V"] = _deviation(center.lap_V, lap_V)
    lap_T = sum((plus.grad_T[i] - minus.grad_T[i]) / (2 * h) for i, (plus, minus) in enumerate(shifted))
    report["lap_T"] = _deviation(center.lap_T, lap_T)
    div = sum((plus.V[i] - minus.V[i]) / (2 * h) for i, (plus, minus) in enumerate(shifted))
    report["div_V"] = _deviation(center.div_V, div)
    worst = max(report.values())
    return (worst, report) if detail else worst


FLUID_SAMPLE_FIELDS = tuple(f.name for f in dc_fields(FluidSample))
