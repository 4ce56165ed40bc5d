"""Coordinate charts on the 0-blown-up double space and their symplectic lifts.

The phase space is T*(R_s x (X x_0 X)) for a surface X with boundary circle
(n = 1).  Charts follow the four boundary regions of the blow-up plus the
interior chart in the original (t, tau) variables:

    INTERIOR  (t, tau, x, y, xi, eta, x', y', xi', eta')
    R1_L      s = t + log x            near L, away from R and ff
    R1_R      s = t + log x'           near R, away from L and ff
    R3_LR     s = t + log x + log x'   near L and R, away from ff
    R2_Lff    X = x/x', Y = (y-y')/x', s = t + log X     near L and ff
    R2_Rff    mirror of R2_Lff with primed/unprimed swapped
    R4_corner u = y - y' >= 0, w = x/u, w' = x'/u, s = t + log w + log w'

Every chart stores its ten coordinates in the uniform order

    (time-like, dual, q1, q2, p1, p2, q3, q4, p3, p4)

so the canonical two-form is always
omega0 = d c1 ^ d c0 + d p1 ^ d q1 + d p2 ^ d q2 + d p3 ^ d q3 + d p4 ^ d q4.

Projective fiber lifts (regions 2 and 4):

    R2:  lam = x' xi,  mu = x' eta,  lam' = xi' + xi X + eta Y,  mu' = eta + eta'
    R4:  lam = xi u,   lam' = xi' u, nu = xi w + xi' w' + eta,   mu' = eta + eta'

and the s-lift subtracts sigma / (defining function) from the conjugate of
each face-defining coordinate (xi~ = xi - sigma/x and so on).

Face defining functions are pinned per chart so that x = rho_L rho_ff and
x' = rho_R rho_ff hold identically:

    chart      rho_L   rho_R   rho_ff
    INTERIOR   x       x'      1
    R1_L/R1_R  x       x'      1
    R3_LR      x       x'      1
    R2_Lff     X       1       x'
    R2_Rff     1       X'      x
    R4_corner  w       w'      u

The fiber-shift map gamma = log rho_L + log rho_R acts on the conjugate
momenta of the defining coordinates only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

__all__ = [
    "ChartId",
    "ChartPoint",
    "ChartDomainError",
    "SingularShiftError",
    "COORD_NAMES",
    "wrap_angle",
    "to_chart",
    "to_interior",
    "from_interior",
    "pullback_symplectic_form",
    "face_defining_functions",
    "gamma",
    "d_gamma",
    "SojournShift",
    "sojourn_time_coordinate",
    "fiber_shift",
    "layout_table",
]


class ChartId(Enum):
    INTERIOR = "Interior"
    R1_L = "R1_L"
    R1_R = "R1_R"
    R2_Lff = "R2_Lff"
    R2_Rff = "R2_Rff"
    R3_LR = "R3_LR"
    R4_corner = "R4_corner"


COORD_NAMES: dict[ChartId, tuple[str, ...]] = {
    ChartId.INTERIOR: ("t", "tau", "x", "y", "xi", "eta", "xp", "yp", "xip", "etap"),
    ChartId.R1_L: ("s", "sigma", "x", "y", "xit", "eta", "xp", "yp", "xip", "etap"),
    ChartId.R1_R: ("s", "sigma", "x", "y", "xi", "eta", "xp", "yp", "xipt", "etap"),
    ChartId.R3_LR: ("s", "sigma", "x", "y", "xit", "eta", "xp", "yp", "xipt", "etap"),
    ChartId.R2_Lff: ("s", "sigma", "X", "Y", "lamt", "mu", "xp", "yp", "lamp", "mup"),
    ChartId.R2_Rff: ("s", "sigma", "Xp", "Yp", "lampt", "mupr", "x", "y", "lam", "mu"),
    ChartId.R4_corner: ("s", "sigma", "w", "u", "lamt", "nu", "wp", "yp", "lampt", "mup"),
}

# canonical pairs (fiber index, base index); identical in every chart by the
# uniform coordinate ordering
_PAIRS = ((1, 0), (4, 2), (5, 3), (8, 6), (9, 7))


class ChartDomainError(ValueError):
    """A coordinate violates the target chart's domain."""

    def __init__(self, coordinate: str, message: str = ""):
        self.coordinate = coordinate
        super().__init__(message or f"chart-domain violation in coordinate {coordinate!r}")


class SingularShiftError(ValueError):
    """log rho_L + log rho_R is singular (point on the L or R face)."""


@dataclass(frozen=True)
class ChartPoint:
    chart: ChartId
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (10,):
            raise ValueError("ChartPoint carries 10 coordinates for n = 1")
        object.__setattr__(self, "coords", c)

    def __getitem__(self, name: str) -> float:
        return float(self.coords[COORD_NAMES[self.chart].index(name)])

    def with_coords(self, coords) -> "ChartPoint":
        return ChartPoint(self.chart, np.asarray(coords, dtype=float))

    @property
    def sigma(self) -> float:
        return float(self.coords[1])


def wrap_angle(d: float) -> float:
    """Wrap an angle difference to the branch nearest the diagonal, (-pi, pi]."""
    w = math.remainder(d, 2 * math.pi)
    return math.pi if w == -math.pi else w


def _require_positive(name: str, value: float):
    # strict positivity thresholds, not exact zero tests: log/ratio formulas
    # degrade before an exact zero is reached
    if not value > 1e-300:
        raise ChartDomainError(name, f"coordinate {name!r} must be positive, got {value}")


# ---------------------------------------------------------------------------
# conversions to / from the interior (t, tau) chart
# ---------------------------------------------------------------------------


def to_interior(p: ChartPoint) -> np.ndarray:
    """Interior coordinates (t, tau, x, y, xi, eta, x', y', xi', eta')."""
    c = p.coords
    if p.chart is ChartId.INTERIOR:
        return c.copy()
    s, sg = c[0], c[1]
    if p.chart is ChartId.R1_L:
        _, _, x, y, xit, eta, xp, yp, xip, etap = c
        _require_positive("x", x)
        return np.array([s - math.log(x), sg, x, y, xit + sg / x, eta, xp, yp, xip, etap])
    if p.chart is ChartId.R1_R:
        _, _, x, y, xi, eta, xp, yp, xipt, etap = c
        _require_positive("xp", xp)
        return np.array([s - math.log(xp), sg, x, y, xi, eta, xp, yp, xipt + sg / xp, etap])
    if p.chart is ChartId.R3_LR:
        _, _, x, y, xit, eta, xp, yp, xipt, etap = c
        _require_positive("x", x)
        _require_positive("xp", xp)
        return np.array(
            [s - math.log(x) - math.log(xp), sg, x, y, xit + sg / x, eta, xp, yp, xipt + sg / xp, etap]
        )
    if p.chart is ChartId.R2_Lff:
        _, _, X, Y, lamt, mu, xp, yp, lamp, mup = c
        _require_positive("X", X)
        _require_positive("xp", xp)
        lam = lamt + sg / X
        x = X * xp
        y = Y * xp + yp
        xi = lam / xp
        eta = mu / xp
        xip = lamp - xi * X - eta * Y
        etap = mup - eta
        return np.array([s - math.log(X), sg, x, y, xi, eta, xp, yp, xip, etap])
    if p.chart is ChartId.R2_Rff:
        swapped = to_interior(ChartPoint(ChartId.R2_Lff, c))
        return _swap_sides(swapped)
    if p.chart is ChartId.R4_corner:
        _, _, w, u, lamt, nu, wp, yp, lampt, mup = c
        _require_positive("w", w)
        _require_positive("u", u)
        _require_positive("wp", wp)
        lam = lamt + sg / w
        lamp = lampt + sg / wp
        x = w * u
        xp = wp * u
        y = yp + u
        xi = lam / u
        xip = lamp / u
        eta = nu - xi * w - xip * wp
        etap = mup - eta
        return np.array([s - math.log(w) - math.log(wp), sg, x, y, xi, eta, xp, yp, xip, etap])
    raise ValueError(f"unknown chart {p.chart}")


def _swap_sides(c: np.ndarray) -> np.ndarray:
    """Exchange the two factors of the double space in interior coordinates."""
    t, tau, x, y, xi, eta, xp, yp, xip, etap = c
    return np.array([t, tau, xp, yp, xip, etap, x, y, xi, eta])


def from_interior(c, target: ChartId) -> ChartPoint:
    c = np.asarray(c, dtype=float)
    t, tau, x, y, xi, eta, xp, yp, xip, etap = c
    if target is ChartId.INTERIOR:
        return ChartPoint(target, c)
    if target is ChartId.R1_L:
        _require_positive("x", x)
        s = t + math.log(x)
        return ChartPoint(target, [s, tau, x, y, xi - tau / x, eta, xp, yp, xip, etap])
    if target is ChartId.R1_R:
        _require_positive("xp", xp)
        s = t + math.log(xp)
        return ChartPoint(target, [s, tau, x, y, xi, eta, xp, yp, xip - tau / xp, etap])
    if target is ChartId.R3_LR:
        _require_positive("x", x)
        _require_positive("xp", xp)
        s = t + math.log(x) + math.log(xp)
        return ChartPoint(
            target, [s, tau, x, y, xi - tau / x, eta, xp, yp, xip - tau / xp, etap]
        )
    if target is ChartId.R2_Lff:
        _require_positive("xp", xp)
        X = x / xp
        _require_positive("X", X)
        Y = wrap_angle(y - yp) / xp
        lam = xp * xi
        mu = xp * eta
        lamp = xip + xi * X + eta * Y
        mup = eta + etap
        s = t + math.log(X)
        return ChartPoint(target, [s, tau, X, Y, lam - tau / X, mu, xp, yp, lamp, mup])
    if target is ChartId.R2_Rff:
        q = from_interior(_swap_sides(c), ChartId.R2_Lff)
        return ChartPoint(target, q.coords)
    if target is ChartId.R4_corner:
        u = wrap_angle(y - yp)
        _require_positive("u", u)
        _require_positive("x", x)
        _require_positive("xp", xp)
        w = x / u
        wp = xp / u
        lam = xi * u
        lamp = xip * u
        nu = xi * w + xip * wp + eta
        mup = eta + etap
        s = t + math.log(w) + math.log(wp)
        return ChartPoint(target, [s, tau, w, u, lam - tau / w, nu, wp, yp, lamp - tau / wp, mup])
    raise ValueError(f"unknown chart {target}")


def to_chart(p: ChartPoint, target: ChartId) -> ChartPoint:
    """Re-express the same abstract phase point in the target chart.

    Requires p to lie in the overlap of the two chart domains; sigma is
    carried through untouched, so it is preserved exactly.
    """
    if p.chart is target:
        return p.with_coords(p.coords.copy())
    return from_interior(to_interior(p), target)


# ---------------------------------------------------------------------------
# canonical two-form
# ---------------------------------------------------------------------------


def pullback_symplectic_form(p: ChartPoint, v1, v2) -> float:
    """omega0(v1, v2) in p's chart: d sigma ^ d s + sum d p_i ^ d q_i."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != (10,) or v2.shape != (10,):
        raise ValueError("tangent vectors must have 10 components")
    val = 0.0
    for ip, iq in _PAIRS:
        val += v1[ip] * v2[iq] - v1[iq] * v2[ip]
    return float(val)


# ---------------------------------------------------------------------------
# face defining functions, sojourn shift
# ---------------------------------------------------------------------------


def face_defining_functions(p: ChartPoint) -> tuple[float, float, float]:
    """(rho_L, rho_R, rho_ff) in p's chart, pinned as in the module docstring."""
    c = p.coords
    ch = p.chart
    if ch in (ChartId.INTERIOR, ChartId.R1_L, ChartId.R1_R, ChartId.R3_LR):
        return float(c[2]), float(c[6]), 1.0
    if ch is ChartId.R2_Lff:
        return float(c[2]), 1.0, float(c[6])
    if ch is ChartId.R2_Rff:
        return 1.0, float(c[2]), float(c[6])
    if ch is ChartId.R4_corner:
        return float(c[2]), float(c[6]), float(c[3])
    raise ValueError(f"unknown chart {ch}")


# (fiber slot, base slot) pairs whose base is a face defining function; the
# shift by c dgamma adds c / base to each such fiber coordinate
_SHIFT_SLOTS: dict[ChartId, tuple[tuple[int, int], ...]] = {
    ChartId.INTERIOR: ((4, 2), (8, 6)),
    ChartId.R1_L: ((4, 2), (8, 6)),
    ChartId.R1_R: ((4, 2), (8, 6)),
    ChartId.R3_LR: ((4, 2), (8, 6)),
    ChartId.R2_Lff: ((4, 2),),
    ChartId.R2_Rff: ((4, 2),),
    ChartId.R4_corner: ((4, 2), (8, 6)),
}


def gamma(p: ChartPoint) -> float:
    """gamma = log rho_L + log rho_R in p's chart."""
    rl, rr, _ = face_defining_functions(p)
    if rl <= 0.0 or rr <= 0.0:
        raise SingularShiftError("gamma diverges on the L/R faces")
    return math.log(rl) + math.log(rr)


def d_gamma(p: ChartPoint) -> np.ndarray:
    """d gamma as a cotangent vector (components on the fiber slots)."""
    rl, rr, _ = face_defining_functions(p)
    if rl <= 0.0 or rr <= 0.0:
        raise SingularShiftError("d gamma diverges on the L/R faces")
    out = np.zeros(10)
    for fiber, base in _SHIFT_SLOTS[p.chart]:
        out[fiber] = 1.0 / p.coords[base]
    return out


@dataclass(frozen=True)
class SojournShift:
    """Bundled gamma / d gamma evaluations for the fiber-shift map."""

    def gamma(self, p: ChartPoint) -> float:
        return gamma(p)

    def d_gamma(self, p: ChartPoint) -> np.ndarray:
        return d_gamma(p)


def sojourn_time_coordinate(p: ChartPoint, direction: str = "forward") -> float:
    """t = s - gamma (forward) or t = s + gamma (backward)."""
    if p.chart is ChartId.INTERIOR:
        raise ChartDomainError("t", "interior chart carries t already; no s-lift to invert")
    g = gamma(p)
    s = float(p.coords[0])
    if direction == "forward":
        return s - g
    if direction == "backward":
        return s + g
    raise ValueError("direction must be 'forward' or 'backward'")


def fiber_shift(p: ChartPoint, sigma: float) -> ChartPoint:
    """Shift along the fibers by sigma * d gamma; the base point is fixed.

    Applying with -sigma inverts it exactly.  With sigma = -p.sigma this
    realises the tilde variables of the s-lift (xi~ = xi - sigma/x, ...).
    """
    rl, rr, _ = face_defining_functions(p)
    if rl <= 0.0 or rr <= 0.0:
        raise SingularShiftError("fiber shift singular on the L/R faces")
    c = p.coords.copy()
    for fiber, base in _SHIFT_SLOTS[p.chart]:
        c[fiber] += sigma / c[base]
    return p.with_coords(c)


# ---------------------------------------------------------------------------
# generated reference table
# ---------------------------------------------------------------------------

_DEFS = {
    ChartId.INTERIOR: "original T*(R_t x X x X) variables",
    ChartId.R1_L: "s = t + log x, xit = xi - sigma/x",
    ChartId.R1_R: "s = t + log x', xipt = xi' - sigma/x'",
    ChartId.R3_LR: "s = t + log x + log x', xit = xi - sigma/x, xipt = xi' - sigma/x'",
    ChartId.R2_Lff: (
        "X = x/x', Y = (y-y')/x'; lam = x' xi, mu = x' eta, "
        "lam' = xi' + xi X + eta Y, mu' = eta + eta'; s = t + log X, lamt = lam - sigma/X"
    ),
    ChartId.R2_Rff: "mirror of R2_Lff with the two factors exchanged",
    ChartId.R4_corner: (
        "u = y - y', w = x/u, w' = x'/u; lam = xi u, lam' = xi' u, "
        "nu = xi w + xi' w' + eta, mu' = eta + eta'; "
        "s = t + log w + log w', lamt = lam - sigma/w, lampt = lam' - sigma/w'"
    ),
}


def layout_table() -> str:
    """Human-readable reference table of chart layouts and conventions."""
    lines = ["chart      coordinates"]
    for ch in ChartId:
        names = ", ".join(COORD_NAMES[ch])
        lines.append(f"{ch.value:<10} ({names})")
        rl, rr, rff = {
            ChartId.INTERIOR: ("x", "x'", "1"),
            ChartId.R1_L: ("x", "x'", "1"),
            ChartId.R1_R: ("x", "x'", "1"),
            ChartId.R3_LR: ("x", "x'", "1"),
            ChartId.R2_Lff: ("X", "1", "x'"),
            ChartId.R2_Rff: ("1", "X'", "x"),
            ChartId.R4_corner: ("w", "w'", "u"),
        }[ch]
        lines.append(f"           rho_L = {rl}, rho_R = {rr}, rho_ff = {rff}")
        lines.append(f"           {_DEFS[ch]}")
    return "\n".join(lines)
