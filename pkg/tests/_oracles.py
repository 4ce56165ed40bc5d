"""Independent oracles for the test suite.

These stay deliberately independent of the code paths they check:
closed-form hyperbolic-disk geodesics, central-difference Hamilton fields,
and a separate coarse 2D polar-grid wave solver for the mode reduction.
"""

import math

import numpy as np

from ahscat.charts import COORD_NAMES, ChartPoint
from ahscat.phase_flow import q_value


def disk_chord(y_in: float, eta_in: float, sigma: float):
    """Closed-form lens datum of the hyperbolic plane (plus branch).

    A unit-speed geodesic with boundary angular momentum eta' has closest
    approach sinh r0 = |eta'/sigma| and subtends the boundary angle
    |dtheta| = 2 atan(|sigma/eta'|); positive eta' rotates the ray toward
    smaller angles.  The renormalised length between its endpoints is
    2 log(2 sin(|dtheta|/2)).
    """
    if eta_in == 0.0:
        dth = math.pi
    else:
        dth = -math.copysign(2.0 * math.atan(abs(sigma / eta_in)), eta_in)
    sojourn = 2.0 * math.log(2.0 * math.sin(abs(dth) / 2.0))
    return y_in + dth, -eta_in, sojourn


def circ_dist(a: float, b: float) -> float:
    return abs(math.remainder(a - b, 2.0 * math.pi))


def fd_hamilton_field(metric, p: ChartPoint, which: str, h: float = 1e-6) -> np.ndarray:
    """Central-difference Hamilton field of q_value in p's chart layout.

    Canonical pairs are (coords[1], coords[0]) and (p_i, q_i) at slots
    (4,2), (5,3), (8,6), (9,7): H = (dq/dp_i) d/dq_i - (dq/dq_i) d/dp_i.
    """
    c = p.coords

    def dq(i):
        cp, cm = c.copy(), c.copy()
        cp[i] += h
        cm[i] -= h
        return (
            q_value(metric, ChartPoint(p.chart, cp), which)
            - q_value(metric, ChartPoint(p.chart, cm), which)
        ) / (2 * h)

    out = np.zeros(10)
    for fiber, base in ((1, 0), (4, 2), (5, 3), (8, 6), (9, 7)):
        out[base] = dq(fiber)
        out[fiber] = -dq(base)
    return out


def wave2d_mode_evolution(profile, m, rho_lo, rho_hi, g_of_rho, t_end,
                          n_rho=220, n_theta=48, cfl=0.3):
    """Coarse 2D polar-grid solve of u_tt = -(Delta_g - 1/4) u.

    Initial data u = g(rho) cos(m theta), u_t = 0 on an annulus away from
    the center and the boundary (short times only: no boundary handling).
    Returns (rho_grid, u(t_end, rho, theta=0 row) reconstructed as the
    cos(m theta) coefficient).  Independent of the 1D reduction: the
    Laplacian is discretised directly in (rho, theta).
    """
    rho = np.linspace(rho_lo, rho_hi, n_rho)
    dr = rho[1] - rho[0]
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    dth = th[1] - th[0]
    f = profile.f_of_rho(rho)
    fh = profile.f_of_rho(rho[:-1] + 0.5 * dr)
    U = np.outer(g_of_rho(rho), np.cos(m * th))
    dt = cfl * min(dr, float(np.min(f)) * dth)
    nsteps = max(1, int(round(t_end / dt)))
    dt = t_end / nsteps

    def lap(u):
        out = np.empty_like(u)
        flux = fh[:, None] * (u[1:] - u[:-1]) / dr
        out[1:-1] = (flux[1:] - flux[:-1]) / (f[1:-1, None] * dr)
        out[0] = 0.0
        out[-1] = 0.0
        utt = (np.roll(u, -1, axis=1) - 2 * u + np.roll(u, 1, axis=1)) / dth**2
        out += utt / f[:, None] ** 2
        return out

    Uprev = U + 0.5 * dt**2 * (lap(U) + 0.25 * U)
    for _ in range(nsteps):
        Unew = 2 * U - Uprev + dt**2 * (lap(U) + 0.25 * U)
        Uprev, U = U, Unew
    coef = (U * np.cos(m * th)[None, :]).sum(axis=1) * 2.0 / n_theta
    if m == 0:
        coef *= 0.5
    return rho, coef
