"""Per-angular-mode wave solver on rotationally symmetric AH surfaces.

In the geodesic radial coordinate rho = log(x_c/x) the surface metric is
d rho^2 + f(rho)^2 d theta^2 with f = phi(x)/x (f = sinh rho for the
hyperbolic plane).  Separating u = sum u_m(t, rho) e^{i m theta} and
conjugating v = f^{1/2} u_m turns the shifted wave equation
(d_t^2 + Delta_g - 1/4) u = 0 into

    v_tt = v_rhorho - W_m(rho) v,
    W_m = m^2/f^2 - (1/4)(f'/f)^2 + (1/2) f''/f - 1/4,

which is (m^2 - 1/4)/sinh^2(rho) for the hyperbolic plane.  W_m is singular
at the center, so the solver marches the u-form

    u_tt = (1/f)(f u_rho)_rho - (m^2/f^2) u + u/4

with a finite-volume stencil: the center is then an honest regular point
(zero flux for m = 0, u(0) = 0 for m >= 1) and no singular potential is
ever discretised.  The m^2/f^2 term is advanced trapezoidally in time,
which removes its stiffness near the center without losing time symmetry;
the time step is limited by the unit wave speed alone (dt <= drho).

The scheme conserves a discrete energy exactly (up to roundoff): the
staggered functional

    E = (1/2)|du/dt|_w^2 + (1/2) q_D(u^n, u^{n+1})
        + (1/4)(<P u^n, u^n>_w + <P u^{n+1}, u^{n+1}>_w)

with w the f-volume weights, q_D the flux form and P = m^2/f^2.  It is a
consistent discretisation of (1/2) integral (v_t^2 + v_rho^2 + W_m v^2).

Radiation fields are extracted at stations rho_e: with s_+ = t + log x and
s_- = t - log x,

    R_+(s_+) = d/ds [phi(x_e)^{-1/2} f(rho_e)^{1/2} u(t, rho_e)],
    t = s_+ - log x_e,

and Richardson extrapolation over stations removes the O(x) boundary
correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import RotSymProfile, GeometryError

try:  # fused stepping kernel; the numpy path below is the reference
    import numba

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False

__all__ = [
    "WaveConfigError",
    "DomainTruncationError",
    "ExtractionError",
    "potential_W",
    "potential_W_center_value",
    "ModeProblem",
    "WaveState",
    "make_state",
    "evolve",
    "RadiationFieldTrace",
    "radiation_field",
    "FundamentalTrace",
    "fundamental_solution_trace",
]


class WaveConfigError(ValueError):
    pass


class DomainTruncationError(RuntimeError):
    """Wave support reached the outer grid end within the time window."""


class ExtractionError(RuntimeError):
    def __init__(self, message, required_rho_max=None):
        super().__init__(message)
        self.required_rho_max = required_rho_max


# ---------------------------------------------------------------------------
# reduced potential
# ---------------------------------------------------------------------------


def potential_W(profile: RotSymProfile, m: int, rho) -> np.ndarray:
    """v-form potential W_m(rho); singular like (m^2 - 1/4)/rho^2 at rho = 0."""
    rho = np.asarray(rho, dtype=float)
    f = profile.f_of_rho(rho)
    f1 = profile.f_of_rho(rho, 1)
    f2 = profile.f_of_rho(rho, 2)
    return m**2 / f**2 - 0.25 * (f1 / f) ** 2 + 0.5 * f2 / f - 0.25


def potential_W_center_value(profile: RotSymProfile, m: int) -> float:
    """Regular part at the center: lim (W_m - (m^2 - 1/4)/rho^2)."""
    beta = profile.f_cubic_coeff()
    return (2.0 - 2.0 * m**2) * beta - 0.25


# ---------------------------------------------------------------------------
# mode problem and state
# ---------------------------------------------------------------------------


@dataclass
class ModeProblem:
    """Grid + operators for angular modes on a closing rot-sym surface.

    m may be a single integer or a vector (one mode per solution column);
    vectors let many modes march in one batched loop.
    """

    m: int | np.ndarray
    profile: RotSymProfile
    drho: float = 2.0**-7
    rho_max: float = 40.0
    dt: float | None = None
    t_max: float = 30.0

    def __post_init__(self):
        if not self.profile.closes_smoothly:
            raise GeometryError("wave solver needs a profile that closes at a center")
        if self.dt is None:
            self.dt = 0.5 * self.drho
        if self.dt > self.drho + 1e-15:
            raise WaveConfigError(
                f"CFL violation: dt = {self.dt} exceeds drho = {self.drho} (unit wave speed)"
            )
        self.mvec = np.atleast_1d(np.abs(np.asarray(self.m, dtype=int)))
        self.batched = np.ndim(self.m) > 0
        if not self.batched:
            self.m = abs(int(self.m))
        n = int(round(self.rho_max / self.drho))
        self.rho = np.arange(n + 1) * self.drho
        rho_safe = self.rho.copy()
        rho_safe[0] = 1.0  # f(0) placeholder, never used in the stencil
        self.f = self.profile.f_of_rho(rho_safe)
        self.f[0] = 0.0
        self.fhalf = self.profile.f_of_rho(self.rho[:-1] + 0.5 * self.drho)
        # volume weights of the f drho measure
        self.wvol = self.f * self.drho
        h = 0.5 * self.drho
        self.wvol[0] = (h / 6.0) * (
            0.0 + 4.0 * float(self.profile.f_of_rho(0.25 * self.drho)) + float(self.fhalf[0])
        )
        # stiff diagonal part, advanced trapezoidally; one column per mode
        # when batched
        if self.batched:
            self.pot = np.zeros((n + 1, len(self.mvec)))
            self.pot[1:, :] = self.mvec[None, :] ** 2 / self.f[1:, None] ** 2
            self._center_free = self.mvec == 0
        else:
            self.pot = np.zeros(n + 1)
            if self.m > 0:
                self.pot[1:] = self.m**2 / self.f[1:] ** 2
            self._center_free = self.m == 0
        self._denom = 1.0 + 0.5 * self.dt**2 * self.pot

    @property
    def n_nodes(self) -> int:
        return len(self.rho)

    def x_of_rho(self, rho):
        return self.profile.x_of_rho(rho)

    def potential(self) -> np.ndarray:
        """W_m on the interior nodes (diagnostic; the march never uses it)."""
        if self.batched:
            raise WaveConfigError("potential() is a single-mode diagnostic")
        W = np.empty_like(self.rho)
        W[0] = np.inf
        W[1:] = potential_W(self.profile, self.m, self.rho[1:])
        return W

    # -- spatial operator ---------------------------------------------------

    def _pot_for(self, u: np.ndarray):
        if self.batched:
            return self.pot
        return self.pot[:, None] if u.ndim == 2 else self.pot

    def apply_D(self, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Flux part + u/4 (everything except the trapezoidal potential)."""
        du = np.empty_like(u) if out is None else out
        two_d = u.ndim == 2
        fh = self.fhalf[:, None] if two_d else self.fhalf
        if not hasattr(self, "_inv_fc"):
            self._inv_fc = 1.0 / (self.f[1:-1] * self.drho**2)
        fc = self._inv_fc[:, None] if two_d else self._inv_fc
        flux = np.subtract(u[1:], u[:-1])
        flux *= fh
        center_flux = flux[0].copy()
        np.subtract(flux[1:], flux[:-1], out=du[1:-1])
        du[1:-1] *= fc
        du[1:-1] += 0.25 * u[1:-1]
        center = center_flux / (self.wvol[0] * self.drho) + 0.25 * u[0]
        if self.batched:
            du[0] = np.where(self._center_free, center, 0.0)
        elif self._center_free:
            du[0] = center
        else:
            du[0] = 0.0
        du[-1] = 0.0
        return du

    def apply_L(self, u: np.ndarray) -> np.ndarray:
        return self.apply_D(u) - self._pot_for(u) * u

    # -- folded tridiagonal coefficients for the fused stepping kernel ------

    def _folded_coeffs(self, dt: float):
        key = abs(dt)
        if getattr(self, "_fold_key", None) != key:
            dt2 = key * key
            n = self.n_nodes
            lo = np.zeros(n)
            hi = np.zeros(n)
            di = np.zeros(n)
            inv = 1.0 / (self.f[1:-1] * self.drho**2)
            lo[1:-1] = dt2 * self.fhalf[:-1] * inv
            hi[1:-1] = dt2 * self.fhalf[1:] * inv
            di[1:-1] = 2.0 + dt2 * (0.25 - (self.fhalf[:-1] + self.fhalf[1:]) * inv)
            cup = dt2 * self.fhalf[0] / (self.wvol[0] * self.drho)
            cw = np.array([2.0 + dt2 * 0.25 - cup, cup])
            self._fold_key = key
            self._fold = (lo, di, hi, cw)
        return self._fold

    def _denom_2d(self, ncols: int) -> np.ndarray:
        if getattr(self, "_den2_cols", None) != ncols:
            if self.batched:
                if self._denom.shape[1] != ncols:
                    raise WaveConfigError("column count does not match the mode batch")
                self._den2 = np.ascontiguousarray(self._denom)
            else:
                self._den2 = np.ascontiguousarray(
                    np.broadcast_to(self._denom[:, None], (self.n_nodes, ncols))
                )
            self._den2_cols = ncols
        return self._den2

    def _center_free_vec(self, ncols: int) -> np.ndarray:
        if self.batched:
            return np.ascontiguousarray(self._center_free)
        return np.full(ncols, bool(self._center_free))


@dataclass
class WaveState:
    """(v, v_t) on the rho grid at a fixed time, with the conserved energy.

    v = f^{1/2} u vanishes at the center by construction; the u-form arrays
    are kept privately for exact continuation of the march.
    """

    v: np.ndarray
    v_t: np.ndarray
    time: float
    energy: float
    _u: np.ndarray | None = None
    _uprev: np.ndarray | None = None
    _dt: float | None = None


def _u_from_v(problem: ModeProblem, v: np.ndarray) -> np.ndarray:
    u = np.zeros_like(v)
    if v.ndim == 2:
        u[1:] = v[1:] / np.sqrt(problem.f[1:, None])
    else:
        u[1:] = v[1:] / np.sqrt(problem.f[1:])
    center = (4.0 * u[1] - u[2]) / 3.0
    if problem.batched:
        u[0] = np.where(problem._center_free, center, 0.0)
    elif problem._center_free:
        u[0] = center
    return u


def _v_from_u(problem: ModeProblem, u: np.ndarray) -> np.ndarray:
    sq = np.sqrt(problem.f[1:, None] if u.ndim == 2 else problem.f[1:])
    v = np.zeros_like(u)
    v[1:] = u[1:] * sq
    return v


def _staggered_energy(problem: ModeProblem, u0: np.ndarray, u1: np.ndarray, dt: float):
    """Exactly conserved discrete energy of the (u0, u1) leapfrog pair."""
    w = problem.wvol[:, None] if u0.ndim == 2 else problem.wvol
    pot = problem._pot_for(u0)
    dudt = (u1 - u0) / dt
    kin = 0.5 * np.sum(w * dudt**2, axis=0)
    qd = -np.sum(w * problem.apply_D(u0) * u1, axis=0)
    qp = 0.25 * (np.sum(w * pot * u0**2, axis=0) + np.sum(w * pot * u1**2, axis=0))
    return kin + 0.5 * qd + qp


def _init_pair(problem: ModeProblem, u: np.ndarray, g: np.ndarray, dt: float):
    """Third-order accurate u at time -dt from (u, u_t) = (u, g)."""
    lu = problem.apply_L(u)
    lg = problem.apply_L(g)
    return u - dt * g + 0.5 * dt**2 * lu - dt**3 / 6.0 * lg


def make_state(problem: ModeProblem, v, v_t, time: float = 0.0) -> WaveState:
    v = np.asarray(v, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    u = _u_from_v(problem, v)
    g = _u_from_v(problem, v_t)
    uprev = _init_pair(problem, u, g, problem.dt)
    e = _staggered_energy(problem, uprev, u, problem.dt)
    return WaveState(v=v, v_t=v_t, time=time, energy=float(np.atleast_1d(e)[0]) if v.ndim == 1 else e,
                     _u=u, _uprev=uprev, _dt=problem.dt)


if _HAVE_NUMBA:

    @numba.njit(parallel=True, fastmath=False, cache=True)
    def _fused_steps(u, uprev, lo, di, hi, denom, center_row, cw, nsub):
        """nsub leapfrog steps of unew = (lo u_- + di u + hi u_+)/denom - uprev.

        u, uprev (N, K) are updated in place; lo/di/hi are the folded
        tridiagonal coefficients including the 2 + dt^2 D terms; row 0 uses
        the center coefficients cw = (c_diag, c_up) where center_row marks
        the columns with the m = 0 regular-center stencil (others pinned 0).
        """
        N, K = u.shape
        for _s in range(nsub):
            for k in numba.prange(K):
                um2 = uprev[0, k]
                if center_row[k]:
                    new0 = (cw[0] * u[0, k] + cw[1] * u[1, k]) / denom[0, k] - um2
                else:
                    new0 = 0.0
                prev_left = u[0, k]
                uprev[0, k] = new0
                for j in range(1, N - 1):
                    nj = (
                        lo[j] * prev_left + di[j] * u[j, k] + hi[j] * u[j + 1, k]
                    ) / denom[j, k] - uprev[j, k]
                    prev_left = u[j, k]
                    uprev[j, k] = nj
                uprev[N - 1, k] = 0.0
            tmp = u
            u = uprev
            uprev = tmp
        return u, uprev


def _march(problem: ModeProblem, u, uprev, nsteps: int, dt: float, record=None, record_every: int = 1):
    """Advance nsteps; optionally record rows `record` every record_every steps.

    Returns (u, uprev, u_rec, ut_rec): the recorded values and the centered
    time derivative at the same instants (one-sided at the ends), shaped
    (nrec, nsteps // record_every + 1, ...).
    """
    dt2 = dt * dt
    if problem.batched or u.ndim == 1:
        denom = problem._denom
    else:
        denom = problem._denom[:, None]

    def step_once(u, uprev, work):
        problem.apply_D(u, out=work)
        work *= dt2
        work += 2.0 * u
        work /= denom
        work -= uprev
        return work, u, uprev  # (unew, u, scratch)

    if _HAVE_NUMBA and u.ndim == 2:
        squeeze = False
        u2 = u.astype(float, copy=True)
        up2 = uprev.astype(float, copy=True)
    elif _HAVE_NUMBA:
        squeeze = True
        u2 = u.reshape(-1, 1).astype(float, copy=True)
        up2 = uprev.reshape(-1, 1).astype(float, copy=True)
    else:
        squeeze = False
        u2 = u.copy()
        up2 = uprev.copy()

    def run_block(u, uprev, nsub):
        if nsub <= 0:
            return u, uprev
        if _HAVE_NUMBA:
            lo, di, hi, cw = problem._folded_coeffs(dt)
            den2 = problem._denom_2d(u.shape[1])
            cfree = problem._center_free_vec(u.shape[1])
            return _fused_steps(u, uprev, lo, di, hi, den2, cfree, cw, nsub)
        work = np.empty_like(u)
        for _ in range(nsub):
            u, uprev, work = step_once(u, uprev, work)
        return u, uprev

    if record is None:
        u2, up2 = run_block(u2, up2, nsteps)
        if squeeze:
            return u2[:, 0], up2[:, 0], None, None
        return u2, up2, None, None

    record = list(record)
    nrec = nsteps // record_every + 1
    shape = (len(record), nrec) + u.shape[1:]
    rec = np.empty(shape, dtype=float)
    rec_t = np.empty(shape, dtype=float)
    work = np.empty_like(u2)

    def rows(a):
        return a[record, 0] if squeeze else a[record]

    for j in range(nrec):
        rec[:, j] = rows(u2)
        prev_rows = rows(up2).copy()
        # one explicit step to expose the centered derivative at this instant
        u2, up2, work = step_once(u2, up2, work)
        rec_t[:, j] = (rows(u2) - prev_rows) / (2.0 * dt)
        if j < nrec - 1:
            u2, up2 = run_block(u2, up2, record_every - 1)
    # the loop ends one step past the last recorded instant: the returned
    # pair is (u at nsteps, u at nsteps + 1); recording consumers ignore it
    if squeeze:
        return up2[:, 0], u2[:, 0], rec, rec_t
    return up2, u2, rec, rec_t


def evolve(problem: ModeProblem, init: WaveState, t_target: float, *, check_truncation: bool = True) -> WaveState:
    """March the state to t_target (forward or backward).

    t_target - init.time must be an integer number of problem.dt steps.
    Raises DomainTruncationError if the outer grid end is excited.
    """
    span = t_target - init.time
    nsteps = int(round(abs(span) / problem.dt))
    if abs(abs(span) - nsteps * problem.dt) > 1e-9:
        raise WaveConfigError("t_target - time must be a multiple of dt")
    if nsteps == 0:
        return init
    sgn = 1.0 if span > 0 else -1.0
    dt = sgn * problem.dt
    u = init._u if init._u is not None else _u_from_v(problem, init.v)
    if init._uprev is not None and init._dt == dt:
        uprev = init._uprev
    else:
        g = _u_from_v(problem, init.v_t)
        uprev = _init_pair(problem, u, g, dt)
    u1, u0, _, _ = _march(problem, u, uprev, nsteps, dt)
    if check_truncation:
        tail = np.max(np.abs(u1[-4:]))
        scale = np.max(np.abs(u1)) + 1e-300
        if tail > 1e-10 * scale:
            raise DomainTruncationError(
                f"support reached the outer grid end (tail {tail:.2e} vs scale {scale:.2e})"
            )
    g1 = (u1 - u0) / dt + 0.5 * dt * problem.apply_L(u1)  # O(dt^2) centered value
    e = _staggered_energy(problem, u0, u1, dt)
    return WaveState(
        v=_v_from_u(problem, u1),
        v_t=_v_from_u(problem, g1),
        time=init.time + nsteps * dt,
        energy=float(np.atleast_1d(e)[0]) if u1.ndim == 1 else e,
        _u=u1,
        _uprev=u0,
        _dt=dt,
    )


# ---------------------------------------------------------------------------
# radiation fields
# ---------------------------------------------------------------------------


@dataclass
class RadiationFieldTrace:
    """R_{+/-}(s) samples for one mode on a uniform s grid."""

    direction: str              # "forward" | "backward"
    s0: float                   # first s sample
    ds: float
    samples: np.ndarray         # (nt,) or (nt, K)
    mode: int
    stations: tuple[float, ...]
    s_support_start: float | None = None

    @property
    def s_grid(self) -> np.ndarray:
        return self.s0 + self.ds * np.arange(self.samples.shape[0])


def _support_bounds(problem: ModeProblem, state: WaveState):
    u = state._u if state._u is not None else _u_from_v(problem, state.v)
    amp = np.max(np.abs(u), axis=tuple(range(1, u.ndim))) if u.ndim > 1 else np.abs(u)
    # support in the working sense: where the data exceeds 1e-8 of its peak
    nz = np.nonzero(amp > 1e-8 * (np.max(amp) + 1e-300))[0]
    if len(nz) == 0:
        return 0.0, 0.0
    return problem.rho[nz[0]], problem.rho[nz[-1]]


def radiation_field(
    problem: ModeProblem,
    init: WaveState,
    direction: str = "forward",
    stations: Sequence[float] | None = None,
    *,
    t_max: float | None = None,
    richardson: bool = True,
    record_every: int = 1,
) -> RadiationFieldTrace:
    """Extract the radiation field of `init` at boundary stations.

    Forward uses 1_+(t) u and s = t + log x, backward 1_-(t) u and
    s = t - log x.  The trace from each station is mapped to a common s
    grid and Richardson-extrapolated in the station x-values (the boundary
    expansion of V is smooth in x, so two stations cancel the O(x) term,
    three the O(x^2) term).  record_every > 1 decimates the s grid; the
    d/ds samples are still centered at the full dt.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    t_max = problem.t_max if t_max is None else t_max
    rho_lo, rho_hi = _support_bounds(problem, init)
    if stations is None:
        base = max(rho_hi + 2.0, 8.0)
        stations = (base, base + math.log(2.0) / 2, base + math.log(2.0))
    stations = tuple(float(r) for r in stations)
    if min(stations) <= rho_hi:
        raise ExtractionError(
            "extraction stations must lie beyond the data support",
            required_rho_max=rho_hi + 2.0,
        )
    need = max(stations) + 2 * problem.drho
    if need > problem.rho_max:
        raise ExtractionError(
            f"grid too small for stations (need rho_max >= {need:.2f})",
            required_rho_max=need,
        )
    if rho_hi + t_max > problem.rho_max:
        raise ExtractionError(
            "outgoing support would reach the grid end within t_max",
            required_rho_max=rho_hi + t_max + 1.0,
        )

    nsteps = int(round(t_max / problem.dt))
    nsteps -= nsteps % record_every
    dt = problem.dt if direction == "forward" else -problem.dt
    u = init._u if init._u is not None else _u_from_v(problem, init.v)
    g = _u_from_v(problem, init.v_t)
    uprev = _init_pair(problem, u, g, dt)
    idx = [int(round(r / problem.drho)) for r in stations]
    _u1, _u0, _rec, rec_t = _march(
        problem, u, uprev, nsteps, dt, record=idx, record_every=record_every
    )
    dudt = rec_t  # centered with the signed step, so already d/dt

    xc = problem.profile.rho_origin_x()
    ds = problem.dt * record_every
    t_n = ds * np.arange(dudt.shape[1])
    traces = []
    s_grids = []
    for k, j in enumerate(idx):
        rho_j = problem.rho[j]
        x_e = xc * math.exp(-rho_j)
        amp = float(problem.profile.phi_at(x_e)) ** -0.5 * math.sqrt(float(problem.f[j]))
        tr = amp * dudt[k]
        tr[0] *= 0.5  # the t = 0 sample carries half weight under 1_{+/-}(t)
        if direction == "forward":
            s = t_n + (math.log(xc) - rho_j)
        else:
            s = -t_n - (math.log(xc) - rho_j)
            s = s[::-1]
            tr = tr[::-1].copy()
        traces.append(tr)
        s_grids.append(s)

    # restrict to the window covered by every station before extrapolating
    lo = max(g[0] for g in s_grids)
    hi = min(g[-1] for g in s_grids)
    s_ref = s_grids[0]
    keep = (s_ref >= lo - 1e-12) & (s_ref <= hi + 1e-12)
    s_ref = s_ref[keep]
    aligned = [traces[0][keep]]
    for k in range(1, len(stations)):
        cs = CubicSpline(s_grids[k], traces[k], axis=0)
        aligned.append(cs(s_ref))

    if richardson and len(stations) > 1:
        xs = np.array([xc * math.exp(-problem.rho[j]) for j in idx])
        out = _neville_at_zero(xs, aligned)
    else:
        out = aligned[0]

    s_start = (math.log(xc) - rho_hi) if direction == "forward" else None
    return RadiationFieldTrace(
        direction=direction,
        s0=float(s_ref[0]),
        ds=ds,
        samples=out,
        mode=problem.m if not problem.batched else tuple(problem.mvec),
        stations=stations,
        s_support_start=s_start,
    )


def _neville_at_zero(xs: np.ndarray, values: list[np.ndarray]) -> np.ndarray:
    """Polynomial extrapolation of values(x) to x = 0."""
    work = [v.astype(float).copy() for v in values]
    n = len(xs)
    for level in range(1, n):
        for i in range(n - level):
            denom = xs[i] - xs[i + level]
            work[i] = (0.0 - xs[i + level]) / denom * work[i] + (xs[i] - 0.0) / denom * work[i + 1]
    return work[0]


# ---------------------------------------------------------------------------
# forward fundamental solution
# ---------------------------------------------------------------------------


@dataclass
class FundamentalTrace:
    """E_+(t, rho_obs; rho_src) per mode, with d/dt, mollified at both ends.

    Mollifier: a Gaussian stencil of width moll_width, sandwiched as
    W^{-1/2} C W^{-1/2} so it is exactly self-adjoint in the f drho measure
    (discrete reciprocity is then exact); one pass at the source, one at
    each observer.  mollifier_transfer gives the exact two-pass symbol for
    deconvolution.
    """

    t: np.ndarray
    values: np.ndarray      # (n_obs, nt)
    dvalues: np.ndarray     # (n_obs, nt) time derivative
    source_rho: float
    observer_rho: tuple[float, ...]
    mode: int
    drho: float
    moll_width: float = 0.0

    def mollifier_transfer(self, lam) -> np.ndarray:
        c, ks = _gauss_stencil(self.moll_width, self.drho)
        lam = np.asarray(lam, dtype=float)
        sym = np.sum(c[:, None] * np.cos(np.outer(ks, lam) * self.drho), axis=0)
        return sym**2


def _gauss_stencil(width: float, drho: float):
    """Normalised discrete Gaussian c_k, k = -K..K (K = 0 gives identity)."""
    if width <= 0:
        return np.array([1.0]), np.array([0])
    K = max(1, int(np.ceil(6.0 * width / drho)))
    ks = np.arange(-K, K + 1)
    c = np.exp(-0.5 * (ks * drho / width) ** 2)
    c /= c.sum()
    return c, ks


def _smooth_w(problem: ModeProblem, vec: np.ndarray, width: float) -> np.ndarray:
    """W^{-1/2} conv(c) W^{1/2} applied to vec (edges left untouched)."""
    c, ks = _gauss_stencil(width, problem.drho)
    K = (len(c) - 1) // 2
    if K == 0:
        return vec.copy()
    w = problem.wvol
    sq = np.sqrt(w)
    dens = vec * sq
    out = np.convolve(dens, c, mode="same")
    out[:K] = dens[:K]
    out[-K:] = dens[-K:]
    return out / sq


def fundamental_solution_trace(
    problem: ModeProblem,
    source_rho: float,
    observer_rho: Sequence[float],
    *,
    t_max: float | None = None,
    record_every: int = 1,
    moll_width: float | None = None,
) -> FundamentalTrace:
    """Forward solution with source delta(rho - source_rho) delta(t).

    Realised as u(0) = 0, u_t(0) = discrete delta of the f drho measure
    with one mollifier pass; the observed field gets the second pass.  The
    mollifier is self-adjoint in the measure, so source/observer exchange
    is exact (discrete reciprocity), and its Gaussian width (default
    3 drho) suppresses the sub-grid precursor of the explicit stencil.
    """
    t_max = problem.t_max if t_max is None else t_max
    width = 3.0 * problem.drho if moll_width is None else moll_width
    c, ks = _gauss_stencil(width, problem.drho)
    K = (len(c) - 1) // 2
    js = int(round(source_rho / problem.drho))
    if js < K + 1 or js > problem.n_nodes - K - 2:
        raise WaveConfigError("source must sit strictly inside the grid")
    delta = np.zeros(problem.n_nodes)
    delta[js] = 1.0 / problem.wvol[js]
    g1 = _smooth_w(problem, delta, width)
    if problem.batched:
        g = np.tile(g1[:, None], (1, len(problem.mvec)))
        if np.any(~problem._center_free):
            g[0, ~problem._center_free] = 0.0
    else:
        g = g1
    u = np.zeros_like(g)
    uprev = _init_pair(problem, u, g, problem.dt)
    nsteps = int(round(t_max / problem.dt))
    nsteps -= nsteps % record_every
    jo = [int(round(r / problem.drho)) for r in observer_rho]
    if min(jo) < K + 1 or max(jo) > problem.n_nodes - K - 2:
        raise WaveConfigError("observers must sit strictly inside the grid")
    rows = sorted(set(sum(([j + int(k) for k in ks] for j in jo), [])))
    _u1, _u0, rec, rec_t = _march(
        problem, u, uprev, nsteps, problem.dt, record=rows, record_every=record_every
    )
    pos = {j: rows.index(j) for j in rows}
    sq = np.sqrt(problem.wvol)
    nt = rec.shape[1]
    tail_shape = rec.shape[2:]
    vals = np.zeros((len(jo), nt) + tail_shape)
    dvals = np.zeros_like(vals)
    for k, j in enumerate(jo):
        for ck, dk in zip(c, ks):
            wfac = ck * sq[j + int(dk)] / sq[j]
            vals[k] += wfac * rec[pos[j + int(dk)]]
            dvals[k] += wfac * rec_t[pos[j + int(dk)]]
    return FundamentalTrace(
        t=problem.dt * record_every * np.arange(nt),
        values=vals,
        dvalues=dvals,
        source_rho=problem.rho[js],
        observer_rho=tuple(problem.rho[j] for j in jo),
        mode=problem.m if not problem.batched else tuple(problem.mvec),
        drho=problem.drho,
        moll_width=width,
    )
