"""Frequency-domain radial solve: per-mode scattering multipliers a_m(lambda).

The stationary equation (Delta_g - n^2/4 - lambda^2) u = 0 reduces per mode
to v'' = (W_m(rho) - lambda^2) v in the same stretched coordinate and with
the same W_m as the time-domain solver.  The regular solution grows out of
the center like rho^(|m| + 1/2); near the boundary it oscillates,

    v ~ c_+ e^{i lambda rho} + c_- e^{-i lambda rho}.

The pinned multiplier is a = conj(raw / raw_free) with raw = c_+/c_- and
raw_free the same ratio for the free problem (W = 0 with the Dirichlet
regular solution sin(lambda rho), ratio exactly -1): the free problem then
has a = 1 at every lambda, and the Fourier transform of the time-domain
mode kernel satisfies FT(k_m)(lambda) = C(lambda) a_m(lambda) with a
mode-independent frozen factor C (a stationary mode e^{-i lambda t} w(rho)
has outgoing trace ~ c_+ and incoming ~ c_-; with the e^{-i lambda s}
transform convention the conjugate ratio is what the kernel multiplies
by).  Real potentials give |a| = 1 up to the quality of the asymptotic
fit; fit conditioning and the Wronskian constancy of the (regular, Jost)
pair are reported with each sample.

Integration is classical fixed-step RK4 on the stretched grid, vectorised
over (m, lambda) pairs; halving the step is the module's grid-convergence
diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import RotSymProfile
from .wave1d import potential_W, potential_W_center_value

__all__ = [
    "SpectralError",
    "NearPoleError",
    "AsymptoticsError",
    "SpectralSample",
    "radial_solve",
    "radial_sweep",
    "reference_phase",
    "wronskian_check",
    "SPECTRAL_CSV_HEADER",
    "spectral_csv_rows",
]


class SpectralError(RuntimeError):
    pass


class NearPoleError(SpectralError):
    """lambda too close to the possible simple pole at 0."""


class AsymptoticsError(SpectralError):
    def __init__(self, message, suggested_rho_max=None):
        super().__init__(message)
        self.suggested_rho_max = suggested_rho_max


@dataclass
class SpectralSample:
    lam: float
    m: int
    a: complex
    cond: float
    fit_residual: float = 0.0
    wronskian_dev: float = 0.0


SPECTRAL_CSV_HEADER = "mode,lambda,re_a,im_a,cond"


def spectral_csv_rows(samples: Sequence[SpectralSample]) -> list[str]:
    rows = [SPECTRAL_CSV_HEADER]
    for s in samples:
        rows.append(
            f"{s.m},"
            + ",".join("%.17g" % v for v in (s.lam, s.a.real, s.a.imag, s.cond))
        )
    return rows


# ---------------------------------------------------------------------------
# vectorised RK4 sweep
# ---------------------------------------------------------------------------


def _rk4_second_order(Wtab: np.ndarray, lam2: np.ndarray, v0, dv0, h: float, mode_map=None):
    """Integrate v'' = (W - lam^2) v over the tabulated grid.

    Wtab holds samples at rho_0 + k h/2 (index 2n = step n), one row per
    distinct potential; mode_map (K,) selects the row for each column
    (identity when omitted).  Returns (v, dv) of shape (nsteps + 1, K).
    """
    Wtab = np.atleast_2d(Wtab)
    nhalf = Wtab.shape[-1]
    nsteps = (nhalf - 1) // 2
    K = len(lam2)
    Wt = np.ascontiguousarray(Wtab.T)
    if mode_map is None:
        mode_map = np.arange(K) % Wtab.shape[0]
    v = np.empty((nsteps + 1, K))
    dv = np.empty((nsteps + 1, K))
    v[0], dv[0] = v0, dv0
    y, dy = np.array(v0, dtype=float), np.array(dv0, dtype=float)
    for n in range(nsteps):
        W0 = Wt[2 * n][mode_map]
        Wh = Wt[2 * n + 1][mode_map]
        W1 = Wt[2 * n + 2][mode_map]
        a0 = (W0 - lam2) * y
        k1v, k1d = dy, a0
        y2 = y + 0.5 * h * k1v
        k2v, k2d = dy + 0.5 * h * k1d, (Wh - lam2) * y2
        y3 = y + 0.5 * h * k2v
        k3v, k3d = dy + 0.5 * h * k2d, (Wh - lam2) * y3
        y4 = y + h * k3v
        k4v, k4d = dy + h * k3d, (W1 - lam2) * y4
        y = y + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        dy = dy + (h / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)
        v[n + 1], dv[n + 1] = y, dy
    return v, dv


def _fit_exponentials(rho_w, v_w, dv_w, lam):
    """Least squares of (v, v') against c+ e^{i lam rho} + c- e^{-i lam rho}."""
    e_p = np.exp(1j * lam * rho_w)
    e_m = np.exp(-1j * lam * rho_w)
    A = np.concatenate(
        [np.stack([e_p, e_m], axis=1), np.stack([1j * lam * e_p, -1j * lam * e_m], axis=1)]
    )
    b = np.concatenate([v_w, dv_w]).astype(complex)
    sol, _res, _rank, sv = np.linalg.lstsq(A, b, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    resid = float(np.linalg.norm(A @ sol - b) / (np.linalg.norm(b) + 1e-300))
    return sol[0], sol[1], cond, resid


def radial_sweep(
    profile: RotSymProfile,
    pairs: Sequence[tuple[int, float]],
    *,
    drho: float = 2.0**-9,
    rho_max: float = 40.0,
    fit_window: float = 8.0,
    with_wronskian: bool = False,
) -> list[SpectralSample]:
    """radial_solve for many (m, lambda) pairs in one vectorised integration."""
    for m, lam in pairs:
        if abs(lam) < 1e-3:
            raise NearPoleError(f"|lambda| = {abs(lam)} < 1e-3 (possible simple pole at 0)")
    h = drho
    rho0 = h
    nsteps = int(round((rho_max - rho0) / h))
    rho_half = rho0 + 0.5 * h * np.arange(2 * nsteps + 1)

    modes = sorted(set(m for m, _l in pairs))
    Wtab = np.stack(
        [potential_W(profile, m, rho_half) for m in modes] + [np.zeros_like(rho_half)]
    )
    free_row = len(modes)
    lams_free = sorted(set(lam for _m, lam in pairs))
    # potential columns followed by one free (W = 0) column per distinct
    # lambda; the free ratio pins the reference phase on the same grid
    mode_map = np.array(
        [modes.index(m) for m, _l in pairs] + [free_row] * len(lams_free)
    )
    K = len(pairs) + len(lams_free)
    lam2 = np.array([lam**2 for _m, lam in pairs] + [lam**2 for lam in lams_free])

    # series init of the regular branch: v = rho^(m+1/2) (1 + b2 rho^2)
    v0 = np.empty(K)
    dv0 = np.empty(K)
    for k, (m, lam) in enumerate(pairs):
        al = m + 0.5
        b2 = (potential_W_center_value(profile, m) - lam**2) / (4.0 * m + 4.0)
        v0[k] = rho0**al * (1 + b2 * rho0**2)
        dv0[k] = al * rho0 ** (al - 1) * (1 + b2 * rho0**2) + rho0**al * 2 * b2 * rho0
    v0[len(pairs):] = rho0
    dv0[len(pairs):] = 1.0
    v, dv = _rk4_second_order(Wtab, lam2, v0, dv0, h, mode_map=mode_map)

    grid = rho0 + h * np.arange(nsteps + 1)
    mask = grid >= rho_max - fit_window
    stride = max(1, int(mask.sum() // 256))
    idx = np.nonzero(mask)[0][::stride]

    free_cache: dict[float, complex] = {}
    for j, lam in enumerate(lams_free):
        k = len(pairs) + j
        cp, cm, _cond, _res = _fit_exponentials(grid[idx], v[idx, k], dv[idx, k], lam)
        free_cache[lam] = complex(cp / cm)

    out = []
    for k, (m, lam) in enumerate(pairs):
        cp, cm, cond, resid = _fit_exponentials(grid[idx], v[idx, k], dv[idx, k], lam)
        if cond > 1e6:
            raise AsymptoticsError(
                f"asymptotics not reached (fit condition {cond:.2e}); "
                f"increase rho_max beyond {rho_max}",
                suggested_rho_max=rho_max + 10.0,
            )
        raw = cp / cm
        a = np.conj(raw / free_cache[lam])
        wdev = 0.0
        if with_wronskian:
            vj, dvj = _jost_backward(Wtab[mode_map[k]], lam, grid, h)
            wdev = wronskian_check((v[:, k], dv[:, k]), (vj, dvj), skip=int(2.0 / h))
        out.append(SpectralSample(lam=lam, m=m, a=complex(a), cond=cond,
                                  fit_residual=resid, wronskian_dev=wdev))
    return out


def radial_solve(
    profile: RotSymProfile,
    m: int,
    lam: float,
    *,
    drho: float = 2.0**-9,
    rho_max: float = 40.0,
    fit_window: float = 8.0,
    with_wronskian: bool = True,
) -> SpectralSample:
    """Scattering multiplier a_m(lambda) from the stationary radial solve."""
    return radial_sweep(
        profile, [(int(m), float(lam))],
        drho=drho, rho_max=rho_max, fit_window=fit_window,
        with_wronskian=with_wronskian,
    )[0]


def reference_phase(lam: float, *, drho: float = 2.0**-9, rho_max: float = 40.0,
                    fit_window: float = 8.0) -> complex:
    """c_+/c_- of the free problem (W = 0, v(0) = 0); equals -1 analytically.

    Computed by the same machinery as the potential solves so that the
    pinned convention a_free = 1 holds exactly at the discrete level.
    """
    h = drho
    nsteps = int(round((rho_max - h) / h))
    Wtab = np.zeros((1, 2 * nsteps + 1))
    v, dv = _rk4_second_order(Wtab, np.array([lam**2]), np.array([h]), np.array([1.0]), h)
    grid = h + h * np.arange(nsteps + 1)
    mask = grid >= rho_max - fit_window
    stride = max(1, int(mask.sum() // 256))
    idx = np.nonzero(mask)[0][::stride]
    cp, cm, _cond, _res = _fit_exponentials(grid[idx], v[idx, 0], dv[idx, 0], lam)
    return complex(cp / cm)


def _jost_backward(Wrow, lam, grid, h):
    """e^{i lam rho}-normalised solution integrated backward from rho_max."""
    n = len(grid)
    Wb = Wrow[::-1].copy()
    vr0 = math.cos(lam * grid[-1])
    vi0 = math.sin(lam * grid[-1])
    dvr0 = -lam * vi0
    dvi0 = lam * vr0
    v, dv = _rk4_second_order(
        Wb, np.array([lam**2, lam**2]),
        np.array([vr0, vi0]), np.array([dvr0, dvi0]), -h,
        mode_map=np.array([0, 0]),
    )
    vj = (v[:, 0] + 1j * v[:, 1])[::-1]
    dvj = (dv[:, 0] + 1j * dv[:, 1])[::-1]
    return vj, dvj


def wronskian_check(sol1, sol2, *, skip: int = 0) -> float:
    """Max deviation of v1 v2' - v1' v2 from its median value on the grid."""
    v1, dv1 = sol1
    v2, dv2 = sol2
    w = v1 * dv2 - dv1 * v2
    w = w[skip:] if skip else w
    mid = np.median(w.real) + 1j * np.median(w.imag)
    return float(np.max(np.abs(w - mid)))
