"""numba-compiled per-particle RK4 kernel for TTP batches.

The scalar field evaluator is generated from the scenario's sympy
expressions (see ``fields._scalar_source``); the kernel below mirrors
``ttp._Geometry`` line for line.  Results agree with the numpy path to
rounding, and each particle is processed independently, so the output does
not depend on how a batch is split.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .fields import KIN_OFFSETS, KIN_SIZE

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

# geometry buffer layout
G_P1H, G_G, G_GN, G_DEG, G_B, G_DLN, G_V, G_XI, G_H, G_GT = 0, 1, 4, 5, 6, 9, 10, 13, 16, 25
G_SIZE = 28


@lru_cache(maxsize=32)
def build_stepper(kin_source: str, eps_grad: float):
    if not HAVE_NUMBA:
        raise ImportError("numba is not available")
    namespace = {"math": math}
    exec(kin_source, namespace)
    kin = njit(namespace["kin"])

    oV, oGV = KIN_OFFSETS["V"], KIN_OFFSETS["grad_V"]
    oq, ogq, oHq = KIN_OFFSETS["q"], KIN_OFFSETS["grad_q"], KIN_OFFSETS["hess_p1_part"]
    otq, otgq = KIN_OFFSETS["dt_q"], KIN_OFFSETS["dt_grad_q"]
    os_, ogs, oHs = KIN_OFFSETS["s"], KIN_OFFSETS["grad_s"], KIN_OFFSETS["hess_s"]
    ots, otgs = KIN_OFFSETS["dt_s"], KIN_OFFSETS["dt_grad_s"]
    ksize = KIN_SIZE

    @njit
    def geometry(x, y, z, t, p0, dp0, alpha, kb, eps_scale, geo):
        kin(x, y, z, t, alpha, kb)
        s = kb[os_]
        p1h = kb[oq] + p0 * s
        geo[G_P1H] = p1h
        gn2 = 0.0
        vg = 0.0
        for a in range(3):
            g = kb[ogq + a] + p0 * kb[ogs + a]
            geo[G_G + a] = g
            gn2 += g * g
            geo[G_V + a] = kb[oV + a]
            vg += kb[oV + a] * g
            geo[G_GT + a] = kb[otgq + a] + dp0 * kb[ogs + a] + p0 * kb[otgs + a]
            for c in range(3):
                geo[G_H + 3 * a + c] = kb[oHq + 3 * a + c] + p0 * kb[oHs + 3 * a + c]
        gn = math.sqrt(gn2)
        geo[G_GN] = gn
        p1h_t = kb[otq] + dp0 * s + p0 * kb[ots]
        geo[G_DLN] = (p1h_t + vg) / p1h
        degenerate = gn < eps_scale * abs(p1h)
        geo[G_DEG] = 1.0 if degenerate else 0.0
        safe = 1.0 if degenerate else gn
        for a in range(3):
            geo[G_B + a] = geo[G_G + a] / safe
        # xi = curl V from grad_V[i, j] = d_i V_j
        geo[G_XI + 0] = kb[oGV + 5] - kb[oGV + 7]
        geo[G_XI + 1] = kb[oGV + 6] - kb[oGV + 2]
        geo[G_XI + 2] = kb[oGV + 1] - kb[oGV + 3]

    @njit
    def rhs(geo, xs, out):
        u0, u1, u2 = xs[3], xs[4], xs[5]
        v0, v1, v2 = geo[G_V] + u0, geo[G_V + 1] + u1, geo[G_V + 2] + u2
        b0, b1, b2 = geo[G_B], geo[G_B + 1], geo[G_B + 2]
        H = geo[G_H:G_H + 9]
        dg0 = geo[G_GT] + (H[0] * v0 + H[1] * v1 + H[2] * v2)
        dg1 = geo[G_GT + 1] + (H[3] * v0 + H[4] * v1 + H[5] * v2)
        dg2 = geo[G_GT + 2] + (H[6] * v0 + H[7] * v1 + H[8] * v2)
        bd = b0 * dg0 + b1 * dg1 + b2 * dg2
        degenerate = geo[G_DEG] != 0.0
        inv = 1.0 / (1.0 if degenerate else geo[G_GN])
        d0, d1, d2 = (dg0 - b0 * bd) * inv, (dg1 - b1 * bd) * inv, (dg2 - b2 * bd) * inv
        xb = geo[G_XI] * b0 + geo[G_XI + 1] * b1 + geo[G_XI + 2] * b2
        if degenerate:
            o0 = o1 = o2 = 0.0
        else:
            o0 = (b1 * d2 - b2 * d1) - xb * b0
            o1 = (b2 * d0 - b0 * d2) - xb * b1
            o2 = (b0 * d1 - b1 * d0) - xb * b2
        half = 0.5 * geo[G_DLN]
        out[0], out[1], out[2] = v0, v1, v2
        out[3] = (o1 * u2 - o2 * u1) + half * u0
        out[4] = (o2 * u0 - o0 * u2) + half * u1
        out[5] = (o0 * u1 - o1 * u0) + half * u2

    @njit
    def inside(xs, lo, hi):
        for a in range(3):
            if xs[a] < lo[a] or xs[a] > hi[a]:
                return False
        return True

    @njit(nogil=True)
    def step(r, n, beta, alive, st, dt, alpha, nxt, lo, hi, eps_scale, project,
             r_out, n_out, beta_out, defect, proj, normdef, post, degen, status):
        N = r.shape[0]
        kb = np.empty(ksize)
        geo = np.empty(G_SIZE)
        x = np.empty(6)
        xs = np.empty(6)
        k = np.empty((4, 6))
        t_end = st[3, 0]
        for i in range(N):
            for a in range(3):
                r_out[i, a] = r[i, a]
                n_out[i, a] = n[i, a]
            beta_out[i] = beta[i]
            if not alive[i]:
                continue
            geometry(r[i, 0], r[i, 1], r[i, 2], st[0, 0], st[0, 1], st[0, 2], alpha, kb, eps_scale, geo)
            vth = math.sqrt(2.0 * geo[G_P1H])
            for a in range(3):
                x[a] = r[i, a]
                x[3 + a] = beta[i] * vth * n[i, a]
            rhs(geo, x, k[0])
            ok = True
            for s in range(1, 4):
                c = dt if s == 3 else 0.5 * dt
                for j in range(6):
                    xs[j] = x[j] + c * k[s - 1, j]
                if not inside(xs, lo, hi):
                    ok = False
                geometry(xs[0], xs[1], xs[2], st[s, 0], st[s, 1], st[s, 2], alpha, kb, eps_scale, geo)
                rhs(geo, xs, k[s])
            for j in range(6):
                xs[j] = x[j] + dt / 6.0 * (k[0, j] + 2 * k[1, j] + 2 * k[2, j] + k[3, j])
            if not (ok and inside(xs, lo, hi)):
                status[i] = 1
                continue
            geometry(xs[0], xs[1], xs[2], t_end, nxt[0], nxt[1], alpha, kb, eps_scale, geo)
            if not geo[G_P1H] > 0.0:
                status[i] = 2
                continue
            vth = math.sqrt(2.0 * geo[G_P1H])
            speed = math.sqrt(xs[3] * xs[3] + xs[4] * xs[4] + xs[5] * xs[5])
            if speed > 0.0:
                nr0, nr1, nr2 = xs[3] / speed, xs[4] / speed, xs[5] / speed
            else:
                nr0, nr1, nr2 = n[i, 0], n[i, 1], n[i, 2]
            deg = geo[G_DEG] != 0.0
            b0, b1, b2 = geo[G_B], geo[G_B + 1], geo[G_B + 2]
            dfc = 0.0 if deg else nr0 * b0 + nr1 * b1 + nr2 * b2
            if project and not deg:
                m0, m1, m2 = nr0 - dfc * b0, nr1 - dfc * b1, nr2 - dfc * b2
            else:
                m0, m1, m2 = nr0, nr1, nr2
            mn = math.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
            m0, m1, m2 = m0 / mn, m1 / mn, m2 / mn
            for a in range(3):
                r_out[i, a] = xs[a]
            n_out[i, 0], n_out[i, 1], n_out[i, 2] = m0, m1, m2
            beta_out[i] = speed / vth
            defect[i] = dfc
            proj[i] = math.sqrt((m0 - nr0) ** 2 + (m1 - nr1) ** 2 + (m2 - nr2) ** 2)
            normdef[i] = abs(math.sqrt(m0 * m0 + m1 * m1 + m2 * m2) - 1.0)
            post[i] = 0.0 if deg else abs(m0 * b0 + m1 * b1 + m2 * b2)
            degen[i] = deg

    return step
