"""Lifted Hamiltonian flows, bicharacteristics and the scattering relation.

The wave operator's half symbols on the two factors of the double space are

    Q_L = (1/2)(-tau^2 + x^2 xi^2  + x^2 h_dual(x, y)  eta^2)
    Q_R = (1/2)(-tau^2 + x'^2 xi'^2 + x'^2 h_dual(x',y') eta'^2)

and the lifted Hamiltonians are q_L = Q_L / rho_L, q_R = Q_R / rho_R in each
chart's defining functions.  In the face charts (tilde variables),

    q_L = sigma xit + (x/2)(xit^2 + h_dual eta^2),

whose Hamilton field is transversal to the face {x = 0} away from sigma = 0
with d x / d gamma -> sigma there; sigma is constant along all flows (the
fields carry no d/d sigma term).

A lens datum is produced by shooting from the R face into the interior along
H_{q_R}, flipping the covector at the ray's deepest point (the matched
diagonal point of the bicharacteristic relation), and continuing along
H_{q_L} out to the L face.  The s-bookkeeping d s / d gamma = xit integrates
the sojourn coordinate s = t + log x + log x'; the sojourn of the datum is
s_out - s_in.

Rotationally symmetric surfaces that close at a center need one extra
manifold patch: the polar normal form (x, theta) degenerates there, so
near-center segments run in Cartesian coordinates (a, b) = (rho cos theta,
rho sin theta) where the dual metric

    |p|^2 + (a p_b - b p_a)^2 G(a^2 + b^2),   G = 1/f^2 - 1/rho^2,

is smooth through the center.  Samples from such segments are recorded in
the interior chart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .charts import (
    ChartDomainError,
    ChartId,
    ChartPoint,
    COORD_NAMES,
    from_interior,
    to_interior,
)
from .geometry import AhmMetric, GeometryError

__all__ = [
    "FlowError",
    "TrappingError",
    "Bicharacteristic",
    "LensDatum",
    "q_value",
    "hamilton_field",
    "integrate",
    "scattering_relation",
    "chord_angle",
    "incoming_for_chord",
    "shift_relation_check",
    "flow_map_symplectic_residual",
    "lens_csv_rows",
    "LENS_CSV_HEADER",
]

# chart-switch hysteresis: enter the center patch at r_in, leave at 2 r_in
_PATCH_R_IN = 0.30
_PATCH_R_OUT = 0.60
_MAX_SWITCHES = 16


class FlowError(RuntimeError):
    pass


class TrappingError(FlowError):
    """Parameter budget exceeded before face arrival."""

    def __init__(self, message, last_sample=None):
        super().__init__(message)
        self.last_sample = last_sample


# ---------------------------------------------------------------------------
# metric function bundle for n = 1
# ---------------------------------------------------------------------------


class _HFuncs:
    """h_dual(x, y) and partial derivatives for an n = 1 family."""

    def __init__(self, metric: AhmMetric):
        if metric.n != 1:
            raise GeometryError("flow charts are implemented for n = 1")
        self.metric = metric
        if metric.is_rotsym():
            prof = metric.profile
            # scalar Horner fast path: the adaptive integrator calls these
            # thousands of times per ray
            coeffs = tuple(reversed(prof.phi.poly))
            bumps = tuple((b.amp, b.center, 1.0 / b.width) for b in prof.phi.bumps)

            def phi01(x: float):
                p = 0.0
                dp = 0.0
                for c in coeffs:
                    dp = dp * x + p
                    p = p * x + c
                for amp, ctr, iw in bumps:
                    u = (x - ctr) * iw
                    g = amp * math.exp(-u * u)
                    p += g
                    dp += -2.0 * u * iw * g
                return p, dp

            def hd(x, y):
                p, _ = phi01(x)
                return 1.0 / (p * p)

            def hd_x(x, y):
                p, dp = phi01(x)
                return -2.0 * dp / (p * p * p)

            self.hd = hd
            self.hd_x = hd_x
            self.hd_y = lambda x, y: 0.0
        else:
            fam = metric.family

            def hd(x, y):
                return 1.0 / float(fam.eval(x, y)[0, 0])

            def hd_x(x, y):
                h = float(fam.eval(x, y)[0, 0])
                return -float(fam.d_x_eval(x, y)[0, 0]) / h**2

            def hd_y(x, y):
                h = float(fam.eval(x, y)[0, 0])
                return -float(fam.d_y_eval(x, y)[0, 0, 0]) / h**2

            self.hd, self.hd_x, self.hd_y = hd, hd_x, hd_y


# ---------------------------------------------------------------------------
# Hamiltonian values and fields per chart
# ---------------------------------------------------------------------------


def q_value(metric: AhmMetric, p: ChartPoint, which: str) -> float:
    """q_L or q_R at p (Q_L/Q_R in the interior chart)."""
    H = _HFuncs(metric)
    c = p.coords
    ch = p.chart
    if which not in ("qL", "qR"):
        raise ValueError("which must be 'qL' or 'qR'")
    if ch is ChartId.INTERIOR:
        t, tau, x, y, xi, eta, xp, yp, xip, etap = c
        if which == "qL":
            return 0.5 * (-(tau**2) + x**2 * xi**2 + x**2 * H.hd(x, y) * eta**2)
        return 0.5 * (-(tau**2) + xp**2 * xip**2 + xp**2 * H.hd(xp, yp) * etap**2)
    s, sg = c[0], c[1]
    if ch in (ChartId.R1_L, ChartId.R3_LR) and which == "qL":
        _, _, x, y, xit, eta = c[:6]
        return sg * xit + 0.5 * x * (xit**2 + H.hd(x, y) * eta**2)
    if ch in (ChartId.R1_R, ChartId.R3_LR) and which == "qR":
        xp, yp, xipt, etap = c[6:]
        return sg * xipt + 0.5 * xp * (xipt**2 + H.hd(xp, yp) * etap**2)
    if ch is ChartId.R1_L and which == "qR":
        xp, yp, xip, etap = c[6:]
        return -(sg**2) / (2 * xp) + 0.5 * xp * (xip**2 + H.hd(xp, yp) * etap**2)
    if ch is ChartId.R1_R and which == "qL":
        _, _, x, y, xi, eta = c[:6]
        return -(sg**2) / (2 * x) + 0.5 * x * (xi**2 + H.hd(x, y) * eta**2)
    if ch is ChartId.R2_Lff:
        _, _, X, Y, lamt, mu, xp, yp, lamp, mup = c
        if which == "qL":
            hd = H.hd(xp * X, xp * Y + yp)
            return sg * lamt + 0.5 * X * (lamt**2 + hd * mu**2)
        lam = lamt + sg / X
        A = xp * lamp - lam * X - mu * Y  # = x' xi'
        B = xp * mup - mu                 # = x' eta'
        return 0.5 * (-(sg**2) + A**2 + H.hd(xp, yp) * B**2)
    if ch is ChartId.R2_Rff:
        q = ChartPoint(ChartId.R2_Lff, c)
        return q_value(metric, q, "qR" if which == "qL" else "qL")
    if ch is ChartId.R4_corner:
        _, _, w, u, lamt, nu, wp, yp, lampt, mup = c
        etat = u * nu - lamt * w - lampt * wp - 2 * sg  # = u eta
        if which == "qL":
            hd = H.hd(u * w, yp + u)
            return sg * lamt + 0.5 * w * (lamt**2 + hd * etat**2)
        etatR = u * mup - etat  # = u eta'
        hd = H.hd(u * wp, yp)
        return sg * lampt + 0.5 * wp * (lampt**2 + hd * etatR**2)
    raise ValueError(f"no q formula for chart {ch} / {which}")


def hamilton_field(metric: AhmMetric, p: ChartPoint) -> tuple[np.ndarray, np.ndarray]:
    """(H_{q_L}(p), H_{q_R}(p)) as 10-vectors in p's chart layout.

    In the interior chart these are H_{Q_L}, H_{Q_R} in the (t, tau)
    variables.
    """
    H = _HFuncs(metric)
    c = p.coords
    ch = p.chart
    vL = np.zeros(10)
    vR = np.zeros(10)
    if ch is ChartId.INTERIOR:
        t, tau, x, y, xi, eta, xp, yp, xip, etap = c
        hd, hdx, hdy = H.hd(x, y), H.hd_x(x, y), H.hd_y(x, y)
        vL[0] = -tau
        vL[2] = x**2 * xi
        vL[3] = x**2 * hd * eta
        vL[4] = -(x * xi**2 + x * hd * eta**2 + 0.5 * x**2 * hdx * eta**2)
        vL[5] = -0.5 * x**2 * hdy * eta**2
        hdp, hdpx, hdpy = H.hd(xp, yp), H.hd_x(xp, yp), H.hd_y(xp, yp)
        vR[0] = -tau
        vR[6] = xp**2 * xip
        vR[7] = xp**2 * hdp * etap
        vR[8] = -(xp * xip**2 + xp * hdp * etap**2 + 0.5 * xp**2 * hdpx * etap**2)
        vR[9] = -0.5 * xp**2 * hdpy * etap**2
        return vL, vR
    s, sg = c[0], c[1]
    if ch in (ChartId.R1_L, ChartId.R1_R, ChartId.R3_LR):
        _, _, x, y, f1, eta, xp, yp, f3, etap = c
        # left side
        if ch in (ChartId.R1_L, ChartId.R3_LR):
            xit = f1
            hd, hdx, hdy = H.hd(x, y), H.hd_x(x, y), H.hd_y(x, y)
            vL[0] = xit
            vL[2] = sg + x * xit
            vL[3] = x * hd * eta
            vL[4] = -0.5 * (xit**2 + hd * eta**2 + x * hdx * eta**2)
            vL[5] = -0.5 * x * hdy * eta**2
        else:  # R1_R: left side unlifted, q_L = -sigma^2/(2x) + (x/2)(xi^2 + hd eta^2)
            xi = f1
            hd, hdx, hdy = H.hd(x, y), H.hd_x(x, y), H.hd_y(x, y)
            vL[0] = -sg / x
            vL[2] = x * xi
            vL[3] = x * hd * eta
            vL[4] = -(sg**2 / (2 * x**2) + 0.5 * (xi**2 + hd * eta**2) + 0.5 * x * hdx * eta**2)
            vL[5] = -0.5 * x * hdy * eta**2
        # right side
        if ch in (ChartId.R1_R, ChartId.R3_LR):
            xipt = f3
            hd, hdx, hdy = H.hd(xp, yp), H.hd_x(xp, yp), H.hd_y(xp, yp)
            vR[0] = xipt
            vR[6] = sg + xp * xipt
            vR[7] = xp * hd * etap
            vR[8] = -0.5 * (xipt**2 + hd * etap**2 + xp * hdx * etap**2)
            vR[9] = -0.5 * xp * hdy * etap**2
        else:  # R1_L: right side unlifted
            xip = f3
            hd, hdx, hdy = H.hd(xp, yp), H.hd_x(xp, yp), H.hd_y(xp, yp)
            vR[0] = -sg / xp
            vR[6] = xp * xip
            vR[7] = xp * hd * etap
            vR[8] = -(sg**2 / (2 * xp**2) + 0.5 * (xip**2 + hd * etap**2) + 0.5 * xp * hdx * etap**2)
            vR[9] = -0.5 * xp * hdy * etap**2
        return vL, vR
    if ch is ChartId.R2_Lff:
        _, _, X, Y, lamt, mu, xp, yp, lamp, mup = c
        xb, yb = xp * X, xp * Y + yp
        hd, hdx, hdy = H.hd(xb, yb), H.hd_x(xb, yb), H.hd_y(xb, yb)
        vL[0] = lamt
        vL[2] = sg + X * lamt
        vL[3] = X * hd * mu
        vL[4] = -0.5 * (lamt**2 + hd * mu**2 + X * xp * hdx * mu**2)
        vL[5] = -0.5 * X * xp * hdy * mu**2
        # smooth continuation onto the front face: no d/dx' component
        vL[8] = -0.5 * X * (hdx * X + hdy * Y) * mu**2
        vL[9] = -0.5 * X * hdy * mu**2
        lam = lamt + sg / X
        A = xp * lamp - lam * X - mu * Y
        B = xp * mup - mu
        hdp, hdpx, hdpy = H.hd(xp, yp), H.hd_x(xp, yp), H.hd_y(xp, yp)
        vR[0] = -sg - A
        vR[2] = -A * X
        vR[3] = -A * Y - hdp * B
        vR[4] = A * lam
        vR[5] = A * mu
        vR[6] = A * xp
        vR[7] = hdp * B * xp
        vR[8] = -(A * lamp + 0.5 * hdpx * B**2 + hdp * B * mup)
        vR[9] = -0.5 * hdpy * B**2
        return vL, vR
    if ch is ChartId.R2_Rff:
        q = ChartPoint(ChartId.R2_Lff, c)
        wR, wL = hamilton_field(metric, q)
        return wL, wR
    if ch is ChartId.R4_corner:
        _, _, w, u, lamt, nu, wp, yp, lampt, mup = c
        etat = u * nu - lamt * w - lampt * wp - 2 * sg
        hd, hdx, hdy = H.hd(u * w, yp + u), H.hd_x(u * w, yp + u), H.hd_y(u * w, yp + u)
        vL[0] = lamt - 2 * w * hd * etat
        vL[2] = sg + w * lamt - w**2 * hd * etat
        vL[3] = w * u * hd * etat
        vL[4] = -(0.5 * (lamt**2 + hd * etat**2) + 0.5 * w * u * hdx * etat**2 - w * hd * etat * lamt)
        vL[5] = -(0.5 * w**2 * hdx * etat**2 + 0.5 * w * hdy * etat**2 + w * hd * etat * nu)
        vL[6] = -w * wp * hd * etat
        vL[8] = w * hd * etat * lampt
        vL[9] = -0.5 * w * hdy * etat**2
        etatR = u * mup - etat
        hdp, hdpx, hdpy = H.hd(u * wp, yp), H.hd_x(u * wp, yp), H.hd_y(u * wp, yp)
        vR[0] = lampt + 2 * wp * hdp * etatR
        vR[2] = w * wp * hdp * etatR
        vR[3] = -wp * u * hdp * etatR
        vR[4] = -wp * hdp * etatR * lamt
        vR[5] = -(0.5 * wp**2 * hdpx * etatR**2 + wp * hdp * etatR * (mup - nu))
        vR[6] = sg + wp * lampt + wp**2 * hdp * etatR
        vR[7] = wp * u * hdp * etatR
        vR[8] = -(0.5 * (lampt**2 + hdp * etatR**2) + 0.5 * wp * u * hdpx * etatR**2 + wp * hdp * etatR * lampt)
        vR[9] = -0.5 * wp * hdpy * etatR**2
        return vL, vR
    raise ValueError(f"unknown chart {ch}")


# ---------------------------------------------------------------------------
# leg integration (side chart + center patch)
# ---------------------------------------------------------------------------


def _polar_rhs(H: _HFuncs, sigma: float, sign: float):
    """sign * H_q on the side-chart state (x, y, xit, eta, s)."""

    def rhs(_g, st):
        x, y, xit, eta, s = st
        hd = H.hd(x, y)
        hdx = H.hd_x(x, y)
        hdy = H.hd_y(x, y)
        return sign * np.array(
            [
                sigma + x * xit,
                x * hd * eta,
                -0.5 * (xit**2 + hd * eta**2 + x * hdx * eta**2),
                -0.5 * x * hdy * eta**2,
                xit,
            ]
        )

    return rhs


class _PatchFuncs:
    """Scalar-fast G(q) = 1/f^2 - 1/q and dG/dq for the center chart."""

    def __init__(self, profile):
        self.xc = profile.rho_origin_x()
        self.beta = profile.f_cubic_coeff()
        coeffs = tuple(reversed(profile.phi.poly))
        bumps = tuple((b.amp, b.center, 1.0 / b.width) for b in profile.phi.bumps)

        def phi01(x: float):
            p = 0.0
            dp = 0.0
            for c in coeffs:
                dp = dp * x + p
                p = p * x + c
            for amp, ctr, iw in bumps:
                u = (x - ctr) * iw
                g = amp * math.exp(-u * u)
                p += g
                dp += -2.0 * u * iw * g
            return p, dp

        self._phi01 = phi01
        q0 = 4e-4
        self._slope = (self._G_direct(q0) + 2.0 * self.beta) / q0

    def _G_direct(self, q: float) -> float:
        r = math.sqrt(q)
        x = self.xc * math.exp(-r)
        p, _dp = self._phi01(x)
        f = p / x
        return 1.0 / (f * f) - 1.0 / q

    def G(self, q: float) -> float:
        if q < 1e-4:
            return -2.0 * self.beta + self._slope * q
        return self._G_direct(q)

    def Gp(self, q: float) -> float:
        if q < 1e-4:
            return self._slope
        r = math.sqrt(q)
        x = self.xc * math.exp(-r)
        p, dp = self._phi01(x)
        f = p / x
        fp = f - dp  # d f / d rho = f - phi'(x)
        return (1.0 / r**3 - fp / f**3) / r


def _patch_rhs(pf: _PatchFuncs, sign: float):
    """sign * Hamilton field on the smooth center-patch state (a, b, pa, pb).

    The s coordinate is not integrated here: d s = -sigma d gamma - d rho_c
    has a kink where the ray crosses the exact center, but patch segments
    have monotone center distance (legs stop at the minimum), so s is
    reconstructed exactly from the endpoints:
        s = s_0 + sign (-sigma) (p - p_0) - (rho_c - rho_c(0)).
    """

    def rhs(_g, st):
        a, b, pa, pb = st
        q = a * a + b * b
        G = pf.G(q)
        Gp = pf.Gp(q)
        ell = a * pb - b * pa
        da = pa - b * ell * G
        db = pb + a * ell * G
        dpa = -(ell * G * pb + ell**2 * Gp * a)
        dpb = ell * G * pa - ell**2 * Gp * b
        return sign * np.array([da, db, dpa, dpb])

    return rhs


def _patch_s(st5_start, sign, sigma, p_rel, a, b):
    """s along a patch segment from the start state and relative parameter."""
    r0 = math.hypot(st5_start[0], st5_start[1])
    return st5_start[4] + sign * (-sigma) * p_rel - (math.hypot(a, b) - r0)


def _polar_to_patch(profile, st, sigma):
    x, y, xit, eta, s = st
    r = math.log(profile.rho_origin_x() / x)
    a, b = r * math.cos(y), r * math.sin(y)
    pr = -(x * xit + sigma)  # p_rho = -x xi
    pa = pr * math.cos(y) - (eta / r) * math.sin(y)
    pb = pr * math.sin(y) + (eta / r) * math.cos(y)
    return np.array([a, b, pa, pb, s])


def _patch_to_polar(profile, st, sigma):
    a, b, pa, pb, s = st
    r = math.hypot(a, b)
    y = math.atan2(b, a)
    x = profile.rho_origin_x() * math.exp(-r)
    pr = (a * pa + b * pb) / r
    eta = a * pb - b * pa
    xit = (-pr - sigma) / x
    return np.array([x, y, xit, eta, s])


@dataclass
class _LegResult:
    state: np.ndarray          # final state, polar or patch
    in_patch: bool
    samples: list              # list of (gamma, regime, state)
    transitions: list          # list of (sample index, from ChartId, to ChartId)
    status: str                # "face" | "turning" | "param" | "budget"
    gamma_end: float
    face_transversal: float | None = None


def _run_leg(
    metric: AhmMetric,
    state0: np.ndarray,
    sigma: float,
    sign: float,
    stop: str,
    *,
    in_patch: bool = False,
    gamma_max: float = 1e3,
    rtol: float = 1e-12,
    atol: float = 1e-13,
) -> _LegResult:
    """Integrate sign * H_q for one side from state0 until the stop fires.

    stop: "face" (defining coordinate reaches 0), "turning" (deepest point:
    d x/d gamma = 0 in polar, minimal center distance in the patch), or a
    float parameter length.
    """
    H = _HFuncs(metric)
    prof = metric.profile if (metric.is_rotsym() and metric.profile.closes_smoothly) else None
    pf = _PatchFuncs(prof) if prof is not None else None
    samples: list = []
    transitions: list = []
    g = 0.0
    st = np.asarray(state0, dtype=float).copy()
    param_target = stop if isinstance(stop, float) else None
    switches = 0

    while True:
        if switches > _MAX_SWITCHES:
            raise FlowError("chart-switch thrash: too many patch transitions")
        remaining = (param_target - g) if param_target is not None else (gamma_max - g)
        if remaining <= 0:
            status = "param" if param_target is not None else "budget"
            return _LegResult(st, in_patch, samples, transitions, status, g)

        events = []
        if not in_patch:
            rhs = _polar_rhs(H, sigma, sign)

            def ev_face(_g, y):
                return y[0]

            # legs may start exactly on the face; only a downward crossing
            # (x decreasing through 0) counts as arrival
            ev_face.terminal = True
            ev_face.direction = -1.0
            events.append(("face", ev_face))
            if stop == "turning":
                def ev_turn(_g, y):
                    return sigma + y[0] * y[2]

                ev_turn.terminal = True
                ev_turn.direction = -math.copysign(1.0, sigma)
                events.append(("turning", ev_turn))
            if prof is not None:
                x_in = prof.rho_origin_x() * math.exp(-_PATCH_R_IN)

                def ev_patch(_g, y):
                    return y[0] - x_in

                ev_patch.terminal = True
                ev_patch.direction = 1.0
                events.append(("patch_in", ev_patch))
        else:
            rhs = _patch_rhs(pf, sign)

            def ev_exit(_g, y):
                return y[0] ** 2 + y[1] ** 2 - _PATCH_R_OUT**2

            ev_exit.terminal = True
            ev_exit.direction = 1.0
            events.append(("patch_out", ev_exit))
            if stop == "turning":
                # minimal distance to the center: d(a^2+b^2)/dgamma crosses 0
                def ev_min(_g, y):
                    d = rhs(_g, y)
                    return y[0] * d[0] + y[1] * d[1]

                ev_min.terminal = True
                ev_min.direction = 1.0
                events.append(("turning", ev_min))

        st_seg = st[:4] if in_patch else st
        sol = solve_ivp(
            rhs,
            (0.0, remaining),
            st_seg,
            method="DOP853",
            rtol=rtol,
            atol=atol,
            dense_output=True,
            events=[e for _, e in events],
        )
        if not sol.success:
            raise FlowError(f"integrator failure: {sol.message}")

        regime = "patch" if in_patch else "polar"

        def full_state(p_rel, y4):
            if not in_patch:
                return np.asarray(y4, dtype=float)
            s_val = _patch_s(st, sign, sigma, p_rel, y4[0], y4[1])
            return np.array([y4[0], y4[1], y4[2], y4[3], s_val])

        for tg, yv in zip(sol.t, sol.y.T):
            samples.append((g + tg, regime, full_state(tg, yv)))

        fired = None
        t_hit = None
        for k, (name, _e) in enumerate(events):
            if len(sol.t_events[k]):
                cand = sol.t_events[k][0]
                if t_hit is None or cand < t_hit:
                    t_hit = cand
                    fired = name
        if fired is None:
            st = full_state(remaining, sol.y[:, -1])
            g += remaining
            if param_target is not None:
                return _LegResult(st, in_patch, samples, transitions, "param", g)
            last = samples[-1] if samples else None
            raise TrappingError(
                f"parameter budget gamma_max = {gamma_max} exceeded before face arrival",
                last_sample=last,
            )

        # refine the crossing by bisection on the dense output, to 1e-12 in
        # the event function (the face-defining coordinate for face events)
        fn = dict(events)[fired]
        t_ref = _bisect_event(sol.sol, fn, max(0.0, t_hit - 1e-6), min(remaining, t_hit + 1e-6))
        st = full_state(t_ref, np.asarray(sol.sol(t_ref), dtype=float))
        g += t_ref
        samples.append((g, regime, st.copy()))

        if fired == "face":
            d = rhs(0.0, st)
            return _LegResult(
                st, in_patch, samples, transitions, "face", g,
                face_transversal=float(sign * d[0]),
            )
        if fired == "turning":
            return _LegResult(st, in_patch, samples, transitions, "turning", g)
        if fired == "patch_in":
            transitions.append((len(samples) - 1, ChartId.R1_L, ChartId.INTERIOR))
            st = _polar_to_patch(prof, st, sigma)
            in_patch = True
            switches += 1
        elif fired == "patch_out":
            transitions.append((len(samples) - 1, ChartId.INTERIOR, ChartId.R1_L))
            st = _patch_to_polar(prof, st, sigma)
            in_patch = False
            switches += 1


def _bisect_event(dense, fn, lo, hi, tol: float = 1e-12, itmax: int = 200):
    flo = fn(0.0, dense(lo))
    fhi = fn(0.0, dense(hi))
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        # widen once; the event reported by the solver lies in [lo, hi]
        lo2, hi2 = max(0.0, lo - 1e-3), hi + 1e-3
        flo, fhi = fn(0.0, dense(lo2)), fn(0.0, dense(hi2))
        lo, hi = lo2, hi2
        if flo * fhi > 0:
            return 0.5 * (lo + hi)
    for _ in range(itmax):
        mid = 0.5 * (lo + hi)
        fm = fn(0.0, dense(mid))
        if abs(fm) < tol:
            return mid
        if flo * fm <= 0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# public data types
# ---------------------------------------------------------------------------


class Branch(Enum):
    PLUS = "plus"
    MINUS = "minus"


@dataclass
class Bicharacteristic:
    """Sampled integral curve of a lifted Hamilton field."""

    samples: list[tuple[float, ChartPoint]]
    transitions: list[tuple[int, ChartId, ChartId]]
    sigma: float
    endpoints: str  # "L" | "R" | "interior" | "interior-escape-failure"
    field: str
    null_residual: float = 0.0

    def sigma_drift(self) -> float:
        return max((abs(p.sigma - self.sigma) for _, p in self.samples), default=0.0)


@dataclass
class LensDatum:
    """One sample of the scattering relation with its sojourn value."""

    s_in: float
    y_in: float
    eta_in: float
    sigma: float
    s_out: float
    y_out: float
    eta_out: float
    branch: Branch
    residual: float
    transversality: float

    @property
    def sojourn(self) -> float:
        return self.s_out - self.s_in


LENS_CSV_HEADER = "s_in,y_in,eta_in,sigma,s_out,y_out,eta_out,sojourn,branch,residual"


def lens_csv_rows(data: list[LensDatum]) -> list[str]:
    rows = [LENS_CSV_HEADER]
    for d in data:
        rows.append(
            ",".join(
                "%.17g" % v
                for v in (d.s_in, d.y_in, d.eta_in, d.sigma, d.s_out, d.y_out, d.eta_out, d.sojourn)
            )
            + f",{d.branch.value},"
            + "%.17g" % d.residual
        )
    return rows


# ---------------------------------------------------------------------------
# sample bookkeeping: leg states -> ChartPoints
# ---------------------------------------------------------------------------


def _leg_sample_to_chartpoint(
    metric, sigma, regime, st, side: str, spectator: np.ndarray
) -> ChartPoint:
    """Embed a 5-dim leg state into a 10-dim ChartPoint.

    side "R": active slot is primed, chart R1_R; side "L": chart R1_L.
    Patch-regime samples are converted to the interior chart (the polar
    angle near the exact center is degenerate; the base point is still
    correct).
    """
    if regime == "patch":
        prof = metric.profile
        x, y, xit, eta, s = _patch_to_polar_safe(prof, st, sigma)
        t = s - math.log(x)
        if side == "R":
            c = np.array(
                [t, sigma, spectator[0], spectator[1], spectator[2], spectator[3],
                 x, y, xit + sigma / x, eta]
            )
        else:
            c = np.array(
                [t, sigma, x, y, xit + sigma / x, eta,
                 spectator[0], spectator[1], spectator[2], spectator[3]]
            )
        return ChartPoint(ChartId.INTERIOR, c)
    x, y, xit, eta, s = st
    if side == "R":
        c = np.array(
            [s, sigma, spectator[0], spectator[1], spectator[2], spectator[3], x, y, xit, eta]
        )
        return ChartPoint(ChartId.R1_R, c)
    c = np.array(
        [s, sigma, x, y, xit, eta, spectator[0], spectator[1], spectator[2], spectator[3]]
    )
    return ChartPoint(ChartId.R1_L, c)


def _patch_to_polar_safe(prof, st, sigma):
    a, b, pa, pb, s = st
    r = math.hypot(a, b)
    if r < 1e-14:
        x = prof.rho_origin_x()
        return x, 0.0, -sigma / x, a * pb - b * pa, s
    return tuple(_patch_to_polar(prof, st, sigma))


def _leg_null_residual(metric, sigma, samples, side):
    H = _HFuncs(metric)
    worst = 0.0
    prof = metric.profile if metric.is_rotsym() else None
    for _g, regime, st in samples:
        if regime == "polar":
            x, y, xit, eta, _s = st
            q = sigma * xit + 0.5 * x * (xit**2 + H.hd(x, y) * eta**2)
        else:
            a, b, pa, pb, _s = st
            qq = a * a + b * b
            G = float(prof.center_metric_correction(np.array([qq]))[0])
            ell = a * pb - b * pa
            K = 0.5 * (pa**2 + pb**2 + ell**2 * G)
            r = math.sqrt(qq)
            x = prof.rho_origin_x() * math.exp(-r)
            q = (K - 0.5 * sigma**2) / x
        worst = max(worst, abs(q))
    return worst


# ---------------------------------------------------------------------------
# integrate() and the scattering relation
# ---------------------------------------------------------------------------


def integrate(
    metric: AhmMetric,
    start: ChartPoint,
    field: str,
    until=("face",),
    *,
    gamma_max: float = 1e3,
    rtol: float = 1e-12,
    atol: float = 1e-13,
    sign: float = 1.0,
) -> Bicharacteristic:
    """Flow `start` along a lifted Hamilton field until the stop condition.

    field: "qL" | "qR" | "QL_interior" | "QR_interior".
    until: ("face",) to run to the corresponding face, or ("param", g_end)
    for a fixed parameter length (g_end = 0 returns the start sample alone).
    sign flips the flow direction.

    Face crossings are located on the dense output by bisection; a budget
    overrun marks the curve as an interior escape failure (for
    scattering_relation it raises TrappingError instead).
    """
    sigma = start.sigma
    if field in ("qL", "qR"):
        side = "L" if field == "qL" else "R"
        ci = to_interior(start) if start.chart not in (ChartId.R1_L, ChartId.R1_R) else None
        if ci is not None:
            start_side = from_interior(ci, ChartId.R1_L if side == "L" else ChartId.R1_R)
        else:
            want = ChartId.R1_L if side == "L" else ChartId.R1_R
            start_side = start if start.chart is want else _reframe_side(start, want)
        c = start_side.coords
        if side == "L":
            st0 = np.array([c[2], c[3], c[4], c[5], c[0]])
            spect = np.array([c[6], c[7], c[8], c[9]])
        else:
            st0 = np.array([c[6], c[7], c[8], c[9], c[0]])
            spect = np.array([c[2], c[3], c[4], c[5]])
        stop = "face" if until[0] == "face" else float(until[1])
        if isinstance(stop, float) and stop == 0.0:
            return Bicharacteristic([(0.0, start_side)], [], sigma, "interior", field)
        res = _run_leg(
            metric, st0, sigma, sign, stop,
            gamma_max=gamma_max, rtol=rtol, atol=atol,
        )
        pts = [
            (g, _leg_sample_to_chartpoint(metric, sigma, regime, st, side, spect))
            for g, regime, st in res.samples
        ]
        endpoint = {"face": side, "param": "interior", "turning": "interior"}.get(
            res.status, "interior-escape-failure"
        )
        bic = Bicharacteristic(
            pts, res.transitions, sigma, endpoint, field,
            null_residual=_leg_null_residual(metric, sigma, res.samples, side),
        )
        return bic
    if field in ("QL_interior", "QR_interior"):
        return _integrate_interior(metric, start, field, until, gamma_max, rtol, atol, sign)
    raise ValueError(f"unknown field {field!r}")


def _reframe_side(p: ChartPoint, want: ChartId) -> ChartPoint:
    """R1_L <-> R1_R relabel for on-face starts (shared coordinate slots).

    Valid only when the point lies on the face of the *active* side, where
    the interior route is unavailable; the s conventions of the two charts
    agree up to the frozen spectator terms absorbed into s.
    """
    return ChartPoint(want, p.coords.copy())


def _integrate_interior(metric, start, field, until, gamma_max, rtol, atol, sign):
    H = _HFuncs(metric)
    sigma = start.coords[1]
    ci = to_interior(start)
    side = "L" if field == "QL_interior" else "R"
    idx = (2, 3, 4, 5) if side == "L" else (6, 7, 8, 9)

    def rhs(_g, y):
        x, yy, xi, eta = y
        hd, hdx, hdy = H.hd(x, yy), H.hd_x(x, yy), H.hd_y(x, yy)
        return sign * np.array(
            [
                x**2 * xi,
                x**2 * hd * eta,
                -(x * xi**2 + x * hd * eta**2 + 0.5 * x**2 * hdx * eta**2),
                -0.5 * x**2 * hdy * eta**2,
            ]
        )

    g_end = float(until[1]) if until[0] == "param" else gamma_max
    y0 = np.array([ci[i] for i in idx])
    sol = solve_ivp(rhs, (0.0, g_end), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise FlowError(sol.message)
    pts = []
    for g, yv in zip(sol.t, sol.y.T):
        c = ci.copy()
        for k, i in enumerate(idx):
            c[i] = yv[k]
        c[0] = ci[0] + sign * (-sigma) * g  # d t / d gamma = -tau
        pts.append((g, ChartPoint(ChartId.INTERIOR, c)))
    return Bicharacteristic(pts, [], sigma, "interior", field)


def scattering_relation(
    metric: AhmMetric,
    incoming: tuple[float, float, float, float],
    branch: Branch = Branch.PLUS,
    *,
    gamma_max: float = 1e3,
    rtol: float = 1e-12,
    atol: float = 1e-13,
    keep_curves: bool = False,
):
    """Flow one incoming boundary covector through the manifold.

    incoming = (s', y', eta', sigma) on the R face (the tilde momentum
    vanishes on the face by the null condition).  The plus branch carries
    sigma < 0 (the sigma = -1 leaf corresponds to unit-speed geodesics),
    the minus branch sigma > 0.

    Returns the LensDatum, plus the two leg Bicharacteristics when
    keep_curves is set.
    """
    s_in, y_in, eta_in, sigma = map(float, incoming)
    if sigma == 0.0:
        raise ValueError("sigma = 0 is rejected: the fields are tangent to the faces there")
    if branch is Branch.PLUS and sigma >= 0:
        raise ValueError("plus branch requires sigma < 0")
    if branch is Branch.MINUS and sigma <= 0:
        raise ValueError("minus branch requires sigma > 0")
    r_sign = -1.0 if branch is Branch.PLUS else 1.0
    l_sign = -r_sign

    st0 = np.array([0.0, y_in, 0.0, eta_in, s_in])
    try:
        leg_r = _run_leg(
            metric, st0, sigma, r_sign, "turning",
            gamma_max=gamma_max, rtol=rtol, atol=atol,
        )
    except TrappingError:
        raise
    # covector flip at the matched diagonal point; record the depth x_h there
    if leg_r.in_patch:
        a, b, pa, pb, s = leg_r.state
        prof = metric.profile
        x_h = prof.rho_origin_x() * math.exp(-math.hypot(a, b))
        st1 = np.array([a, b, -pa, -pb, 0.0])
    else:
        x, y, xit, eta, s = leg_r.state
        x_h = x
        st1 = np.array([x, y, -xit - 2 * sigma / x, -eta, 0.0])
    delta_r = float(s) - s_in
    leg_l = _run_leg(
        metric, st1, sigma, l_sign, "face",
        in_patch=leg_r.in_patch, gamma_max=gamma_max, rtol=rtol, atol=atol,
    )
    if leg_l.status != "face":
        raise TrappingError("L leg exceeded the parameter budget", last_sample=leg_l.samples[-1])
    x_f, y_f, xit_f, eta_f, delta_l = leg_l.state
    # sojourn in the radiation-trace conventions s'_in = t - log x',
    # s_out = t + log x: the per-leg face charts track t + log(own face
    # coordinate), so the incoming contribution enters with a flipped sign
    # and the corner crossing contributes 2 log x at the matched point
    sojourn = float(delta_l) - delta_r + 2.0 * math.log(x_h)
    resid = max(
        _leg_null_residual(metric, sigma, leg_r.samples, "R"),
        _leg_null_residual(metric, sigma, leg_l.samples, "L"),
    )
    datum = LensDatum(
        s_in=s_in,
        y_in=y_in,
        eta_in=eta_in,
        sigma=sigma,
        s_out=s_in + sojourn,
        y_out=float(y_f),
        eta_out=float(eta_f),
        branch=branch,
        residual=resid,
        transversality=abs((leg_l.face_transversal or 0.0) * l_sign - sigma),
    )
    if not keep_curves:
        return datum
    spectR = np.array([1.0, 0.0, 0.0, 0.0])
    curve_r = Bicharacteristic(
        [(g, _leg_sample_to_chartpoint(metric, sigma, rg, stv, "R", spectR))
         for g, rg, stv in leg_r.samples],
        leg_r.transitions, sigma, "interior", "qR",
        null_residual=_leg_null_residual(metric, sigma, leg_r.samples, "R"),
    )
    curve_l = Bicharacteristic(
        [(g, _leg_sample_to_chartpoint(metric, sigma, rg, stv, "L", spectR))
         for g, rg, stv in leg_l.samples],
        leg_l.transitions, sigma, "L", "qL",
        null_residual=_leg_null_residual(metric, sigma, leg_l.samples, "L"),
    )
    return datum, curve_r, curve_l


# ---------------------------------------------------------------------------
# shift relation and symplectic-map diagnostics
# ---------------------------------------------------------------------------


def chord_angle(metric: AhmMetric, eta_in: float, sigma: float = -1.0) -> float:
    """|wrapped boundary angle| swept by the ray with incoming eta_in."""
    d = scattering_relation(metric, (0.0, 0.0, eta_in, sigma), Branch.PLUS)
    return abs(math.remainder(d.y_out - d.y_in, 2 * math.pi))


def incoming_for_chord(
    metric: AhmMetric,
    dtheta: float,
    sigma: float = -1.0,
    *,
    eta_hi: float = 60.0,
    tol: float = 1e-10,
) -> float:
    """eta' >= 0 whose ray subtends boundary angle dtheta (bisection).

    On the hyperbolic plane this inverts dtheta = 2 atan(|sigma|/eta'); for
    perturbed profiles it is the numerical lens-map inverse used to aim at
    prescribed angle pairs.
    """
    if not 0 < dtheta <= math.pi:
        raise ValueError("dtheta must lie in (0, pi]")
    if dtheta >= math.pi - 1e-12:
        return 0.0
    lo, hi = 0.0, eta_hi
    f_lo = chord_angle(metric, lo, sigma) - dtheta
    f_hi = chord_angle(metric, hi, sigma) - dtheta
    if f_lo * f_hi > 0:
        raise FlowError("target angle not bracketed; increase eta_hi")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f_mid = chord_angle(metric, mid, sigma) - dtheta
        if abs(f_mid) < tol:
            return mid
        if f_lo * f_mid <= 0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi)


def shift_relation_check(metric: AhmMetric, bichar: Bicharacteristic) -> float:
    """Residual of (s, sigma)-samples against an independent (t, tau) flow.

    Re-integrates the unlifted Hamilton flow from the first sample and
    compares every lifted sample with the fiber-shifted (t, tau) curve:
    the two must agree by the shift relation (samples must be strictly
    interior polar points of a qL/qR curve).
    """
    if bichar.field not in ("qL", "qR"):
        raise ValueError("shift check applies to lifted-field curves")
    side = "L" if bichar.field == "qL" else "R"
    idx = (2, 3, 4, 5) if side == "L" else (6, 7, 8, 9)
    sigma = bichar.sigma
    H = _HFuncs(metric)

    pts = [p for _g, p in bichar.samples if p.chart in (ChartId.R1_L, ChartId.R1_R)]
    if len(pts) < 2:
        raise ValueError("need at least two interior polar samples")
    c0 = to_interior(pts[0])
    t0 = c0[0]

    def rhs(_t, z):
        x, yy, xi, eta = z
        hd, hdx, hdy = H.hd(x, yy), H.hd_x(x, yy), H.hd_y(x, yy)
        # d/dt = H_{Q}/(-tau) on the null set
        return np.array(
            [
                x**2 * xi,
                x**2 * hd * eta,
                -(x * xi**2 + x * hd * eta**2 + 0.5 * x**2 * hdx * eta**2),
                -0.5 * x**2 * hdy * eta**2,
            ]
        ) / (-sigma)

    t_vals = []
    for p in pts:
        ci = to_interior(p)
        t_vals.append(ci[0])
    t_lo, t_hi = min(t_vals), max(t_vals)
    z0 = np.array([c0[i] for i in idx])
    sol = solve_ivp(
        rhs, (t0, t_hi + 1e-9) if t_hi > t0 else (t0, t_lo - 1e-9),
        z0, method="DOP853", rtol=1e-12, atol=1e-13, dense_output=True,
    )
    if not sol.success:
        raise FlowError(sol.message)
    worst = 0.0
    for p, t in zip(pts, t_vals):
        if (t - sol.t[0]) * (t - sol.t[-1]) > 0:
            continue
        x, yy, xi, eta = sol.sol(t)
        # fiber shift by sigma d gamma maps (t, tau) momenta to the tilde ones
        xit_ref = xi - sigma / x
        k = 4 if side == "L" else 8
        b = 2 if side == "L" else 6
        worst = max(
            worst,
            abs(p.coords[b] - x),
            abs(p.coords[b + 1] - yy),
            abs(p.coords[k] - xit_ref),
            abs(p.coords[k + 1] - eta),
        )
    return worst


def flow_map_symplectic_residual(
    metric: AhmMetric,
    state0: np.ndarray,
    sigma: float,
    gamma_len: float,
    *,
    h: float = 1e-6,
    sign: float = 1.0,
) -> float:
    """|Phi_gamma^* omega0 - omega0| via central-difference Jacobians.

    state0 = (x, y, xit, eta, s); the flow map acts on the six coordinates
    (x, y, xit, eta, s, sigma) with canonical pairs (xit, x), (eta, y),
    (sigma, s).
    """

    def flow(st6):
        res = _run_leg(
            metric, st6[:5], st6[5], sign, float(gamma_len),
            rtol=1e-12, atol=1e-13,
        )
        if res.in_patch:
            out5 = _patch_to_polar(metric.profile, res.state, st6[5])
        else:
            out5 = res.state
        return np.concatenate([out5, [st6[5]]])

    base = np.concatenate([np.asarray(state0, dtype=float), [sigma]])
    J = np.zeros((6, 6))
    for k in range(6):
        dp = base.copy()
        dm = base.copy()
        dp[k] += h
        dm[k] -= h
        J[:, k] = (flow(dp) - flow(dm)) / (2 * h)
    # omega in the (x, y, xit, eta, s, sigma) ordering
    Om = np.zeros((6, 6))
    for ip, iq in ((2, 0), (3, 1), (5, 4)):
        Om[ip, iq] = 1.0
        Om[iq, ip] = -1.0
    return float(np.max(np.abs(J.T @ Om @ J - Om)))
