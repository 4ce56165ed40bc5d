"""Asymptotically hyperbolic metrics in boundary normal form.

All metrics handled here are given on a collar (0, x_max] x boundary as

    g = (dx^2 + h(x)) / x^2,        h(0) = h0,

where h(x) is a family of metrics on the boundary manifold and x is the
boundary defining function.  The dual quadratic form on covectors (xi, eta)
is

    g*(x, y, xi, eta) = x^2 xi^2 + x^2 h_dual(x, y)(eta, eta),

which is what the Hamiltonian flow consumes.  For rotationally symmetric
surfaces (boundary = S^1, n = 1) we use h(x, theta) = phi(x)^2 dtheta^2 with
a scalar profile phi normalised by phi(0) = 1.

The built-in hyperbolic-plane model is phi(x) = 1 - x^2/4 on x in (0, 2]:
with x = 2 e^{-r} this is the disk metric dr^2 + sinh(r)^2 dtheta^2, the
collar closing smoothly at the center x = 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "GaussianBump",
    "PhiExpression",
    "RotSymProfile",
    "BoundaryMetricFamily",
    "RotSymFamily",
    "ModelTag",
    "Topology",
    "AhmMetric",
    "dual_metric_value",
    "validate_metric",
    "MetricValidationReport",
    "h2_metric",
    "h2_profile",
    "bump_profile",
    "metric_from_config",
]


class GeometryError(ValueError):
    """Raised for metric evaluations outside their domain of validity."""


# ---------------------------------------------------------------------------
# profile expressions: polynomial + Gaussian bumps, with analytic derivatives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianBump:
    """amp * exp(-((x - center)/width)^2)."""

    amp: float
    center: float
    width: float

    def eval(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        u = (x - self.center) / self.width
        g = self.amp * np.exp(-(u**2))
        if order == 0:
            return g
        # d^k/dx^k exp(-u^2) = (-1/w)^k H_k(u) exp(-u^2) with Hermite H_k.
        h = np.polynomial.hermite.hermval(u, [0.0] * order + [1.0])
        return g * h * (-1.0 / self.width) ** order


@dataclass(frozen=True)
class PhiExpression:
    """Profile phi(x) = sum_k poly[k] x^k + sum of Gaussian bumps."""

    poly: tuple[float, ...] = (1.0,)
    bumps: tuple[GaussianBump, ...] = ()

    def eval(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        c = np.polynomial.polynomial.polyder(np.asarray(self.poly, dtype=float), order) \
            if order else np.asarray(self.poly, dtype=float)
        out = np.polynomial.polynomial.polyval(x, c) if len(c) else np.zeros_like(x)
        for b in self.bumps:
            out = out + b.eval(x, order)
        return out

    def __call__(self, x, order: int = 0):
        return self.eval(x, order)


# ---------------------------------------------------------------------------
# rotationally symmetric profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotSymProfile:
    """Scalar profile phi(x) > 0 defining h(x, theta) = phi(x)^2 dtheta^2.

    phi(0) = 1 normalises h0 = dtheta^2.  If phi has a simple zero at
    x_c <= x_max with phi'(x_c) = -1, the surface closes smoothly at a
    center; the geodesic normal coordinate from the center is
    rho = log(x_c / x).
    """

    phi: PhiExpression
    x_max: float
    name: str = "rotsym"

    def __post_init__(self):
        if abs(float(self.phi.eval(0.0)) - 1.0) > 1e-12:
            raise GeometryError("profile must satisfy phi(0) = 1")

    # -- center ------------------------------------------------------------

    @property
    def center_x(self) -> float | None:
        """x-value of the smooth center (root of phi near x_max), if any."""
        return _find_center(self.phi, self.x_max)

    @property
    def closes_smoothly(self) -> bool:
        xc = self.center_x
        if xc is None:
            return False
        return abs(float(self.phi.eval(xc, 1)) + 1.0) < 1e-6

    # -- collar evaluations --------------------------------------------------

    def phi_at(self, x, order: int = 0):
        return self.phi.eval(x, order)

    def h_dual(self, x):
        """Coefficient of eta^2 in the dual boundary form: 1/phi(x)^2."""
        p = self.phi.eval(x)
        return 1.0 / p**2

    def h_dual_dx(self, x):
        p = self.phi.eval(x)
        dp = self.phi.eval(x, 1)
        return -2.0 * dp / p**3

    # -- stretched coordinate rho = log(x_c/x) (center at rho = 0) ----------

    def rho_origin_x(self) -> float:
        """Reference x for rho = -log x + const; the center when it exists."""
        xc = self.center_x
        return xc if xc is not None else self.x_max

    def x_of_rho(self, rho):
        return self.rho_origin_x() * np.exp(-np.asarray(rho, dtype=float))

    def rho_of_x(self, x):
        return np.log(self.rho_origin_x() / np.asarray(x, dtype=float))

    def f_of_rho(self, rho, order: int = 0):
        """f(rho) = phi(x)/x with x = x_c e^{-rho}; g = drho^2 + f^2 dtheta^2.

        Derivatives in rho follow from d x/d rho = -x:
            f'   = f - phi'(x)
            f''  = f' + x phi''(x)
            f''' = f'' + x phi''(x) + x^2 phi'''(x)
        """
        rho = np.asarray(rho, dtype=float)
        x = self.x_of_rho(rho)
        f0 = self.phi.eval(x) / x
        if order == 0:
            return f0
        f1 = f0 - self.phi.eval(x, 1)
        if order == 1:
            return f1
        f2 = f1 + x * self.phi.eval(x, 2)
        if order == 2:
            return f2
        if order == 3:
            return f2 + x * self.phi.eval(x, 2) + x**2 * self.phi.eval(x, 3)
        raise ValueError("order must be 0..3")

    def f_cubic_coeff(self) -> float:
        """beta with f(rho) = rho + beta rho^3 + O(rho^5) at a smooth center."""
        if not self.closes_smoothly:
            raise GeometryError("profile has no smooth center")
        r = 0.05
        return float((self.f_of_rho(r) - r) / r**3)

    def center_metric_correction(self, rsq):
        """G(rho^2) = 1/f(rho)^2 - 1/rho^2, smooth through the center.

        Used by the Cartesian center chart: the dual metric there is
        |p|^2 + (a p_b - b p_a)^2 G(a^2 + b^2).  A series in rho^2 is used
        near 0 where the direct expression cancels catastrophically.
        """
        rsq = np.asarray(rsq, dtype=float)
        beta = self.f_cubic_coeff()
        out = np.empty_like(rsq)
        small = rsq < 1e-4
        # f = rho (1 + beta rho^2 + ...):  G = -2 beta + O(rho^2); the O(rho^2)
        # coefficient (3 beta^2 - 2 gamma5) is taken from the H2 value scaled
        # by the profile's own fifth-order behaviour via one sample point.
        if np.any(~small):
            r = np.sqrt(rsq[~small])
            f = self.f_of_rho(r)
            out[~small] = 1.0 / f**2 - 1.0 / rsq[~small]
        if np.any(small):
            r0 = 0.02
            f0 = float(self.f_of_rho(r0))
            g0 = 1.0 / f0**2 - 1.0 / r0**2
            slope = (g0 - (-2.0 * beta)) / r0**2
            out[small] = -2.0 * beta + slope * rsq[small]
        return out


def _find_center(phi: PhiExpression, x_max: float) -> float | None:
    xs = np.linspace(1e-9, x_max, 2049)
    vals = phi.eval(xs)
    sign = np.signbit(vals)
    if not sign.any():
        # allow a root exactly at x_max (H2 case: phi(2) = 0)
        if abs(float(phi.eval(x_max))) < 1e-12:
            return x_max
        return None
    k = int(np.argmax(sign))
    lo, hi = xs[k - 1], xs[k]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(phi.eval(lo)) * float(phi.eval(mid)) <= 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# boundary metric families (general n) and the metric object
# ---------------------------------------------------------------------------


class BoundaryMetricFamily:
    """Family h(x, y) of boundary metrics with analytic derivatives.

    Subclasses provide eval/d_x_eval/d_y_eval returning (n, n) arrays.
    Derivatives are supplied analytically; finite differences are only a
    validation cross-check (see validate_metric).
    """

    n: int = 1
    x_max: float = 1.0

    def eval(self, x: float, y) -> np.ndarray:
        raise NotImplementedError

    def d_x_eval(self, x: float, y) -> np.ndarray:
        raise NotImplementedError

    def d_y_eval(self, x: float, y) -> np.ndarray:
        """Stacked (n, n, n) array of dh/dy_k."""
        raise NotImplementedError


@dataclass
class RotSymFamily(BoundaryMetricFamily):
    """n = 1 family h(x, theta) = phi(x)^2 dtheta^2."""

    profile: RotSymProfile

    def __post_init__(self):
        self.n = 1
        self.x_max = self.profile.x_max

    def eval(self, x, y=None):
        return np.array([[float(self.profile.phi_at(x)) ** 2]])

    def d_x_eval(self, x, y=None):
        p = float(self.profile.phi_at(x))
        dp = float(self.profile.phi_at(x, 1))
        return np.array([[2.0 * p * dp]])

    def d_y_eval(self, x, y=None):
        return np.zeros((1, 1, 1))


class ModelTag(Enum):
    HYPERBOLIC_FUNNEL_NORMAL_FORM = "h2"
    ROT_SYM_SURFACE = "rotsym"
    USER_DEFINED = "user"


class Topology(Enum):
    BOUNDARY_CIRCLE = "circle"
    BOUNDARY_SPHERE = "sphere"


@dataclass
class AhmMetric:
    family: BoundaryMetricFamily
    model_tag: ModelTag = ModelTag.USER_DEFINED
    topology: Topology = Topology.BOUNDARY_CIRCLE

    @property
    def n(self) -> int:
        return self.family.n

    @property
    def x_max(self) -> float:
        return self.family.x_max

    @property
    def profile(self) -> RotSymProfile:
        if not isinstance(self.family, RotSymFamily):
            raise GeometryError("metric is not rotationally symmetric")
        return self.family.profile

    def is_rotsym(self) -> bool:
        return isinstance(self.family, RotSymFamily)

    def h_dual_form(self, x: float, y, eta) -> float:
        """Dual quadratic form of h(x, y) applied to the covector eta."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        hinv = np.linalg.inv(self.family.eval(x, y))
        return float(eta @ hinv @ eta)


def dual_metric_value(metric: AhmMetric, pt) -> float:
    """g*(x, y, xi, eta) = x^2 xi^2 + x^2 h_dual(x,y)(eta).

    pt is (x, y, xi, eta) with y, eta scalars for n = 1 or length-n arrays.
    Interior evaluation only: requires 0 < x and x within the collar
    (strictly below the center for models that close up).
    """
    x, y, xi, eta = pt
    x = float(x)
    if x <= 0.0:
        raise GeometryError("dual_metric_value requires x > 0 (interior point)")
    xmax = metric.x_max
    if metric.is_rotsym() and metric.profile.closes_smoothly:
        if x >= xmax:
            raise GeometryError(
                f"x = {x} is at or beyond the center x = {xmax} where the "
                "normal-form chart degenerates"
            )
    elif x > xmax:
        raise GeometryError(f"x = {x} exceeds the collar width x_max = {xmax}")
    return x**2 * float(xi) ** 2 + x**2 * metric.h_dual_form(x, y, eta)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class MetricValidationReport:
    failures: list[str] = field(default_factory=list)
    derivative_residual: float = 0.0
    smoothness_proxy: float = 0.0
    n_samples: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def validate_metric(
    metric: AhmMetric,
    n_x: int = 100,
    n_y: int = 100,
    fd_step: float = 1e-4,
) -> MetricValidationReport:
    """Sample the collar and report positivity / derivative-consistency.

    Diagnostic only: failures are collected, never raised.  The
    finite-difference check compares d_x_eval against a centered difference
    of eval; the residual should be O(fd_step^2) for consistent analytic
    derivatives.
    """
    report = MetricValidationReport()
    xmax = metric.x_max
    xs = np.linspace(xmax / n_x, xmax * (1 - 1e-9), n_x)
    if metric.is_rotsym() and metric.profile.closes_smoothly:
        xs = xs * (1 - 1e-6)  # keep strictly inside the center
    ys = np.linspace(0.0, 2 * np.pi, n_y, endpoint=False)
    resid = 0.0
    smooth = 0.0
    prev = None
    for x in xs:
        for y in ys:
            h = metric.family.eval(x, y)
            report.n_samples += 1
            if not np.all(np.isfinite(h)):
                report.failures.append(f"non-finite h at (x={x:.6g}, y={y:.6g})")
                continue
            if np.any(np.linalg.eigvalsh(0.5 * (h + h.T)) <= 0.0):
                report.failures.append(f"h not positive definite at (x={x:.6g}, y={y:.6g})")
            step = min(fd_step, 0.49 * x, 0.49 * (xmax - x) if xmax > x else fd_step)
            if step > 0:
                fd = (metric.family.eval(x + step, y) - metric.family.eval(x - step, y)) / (2 * step)
                resid = max(resid, float(np.max(np.abs(fd - metric.family.d_x_eval(x, y)))))
        h0 = metric.family.eval(x, ys[0])
        if prev is not None:
            smooth = max(smooth, float(np.max(np.abs(h0 - prev))) / (xs[1] - xs[0]))
        prev = h0
    report.derivative_residual = resid
    report.smoothness_proxy = smooth
    return report


# ---------------------------------------------------------------------------
# built-ins and config ingestion
# ---------------------------------------------------------------------------


def h2_profile() -> RotSymProfile:
    """The hyperbolic plane: phi(x) = 1 - x^2/4 on (0, 2], f(rho) = sinh(rho)."""
    return RotSymProfile(PhiExpression(poly=(1.0, 0.0, -0.25)), x_max=2.0, name="h2")


def h2_metric() -> AhmMetric:
    return AhmMetric(
        RotSymFamily(h2_profile()),
        model_tag=ModelTag.HYPERBOLIC_FUNNEL_NORMAL_FORM,
        topology=Topology.BOUNDARY_CIRCLE,
    )


def bump_profile(amp: float = 0.012, center: float = 0.9, width: float = 0.25) -> RotSymProfile:
    """H2 with an additive Gaussian bump, the built-in non-trapping perturbation.

    The bump is centered inside the collar and decays fast enough that
    phi(0) = 1 and the smooth closure at the center are preserved to well
    below solver tolerances; the normalisation subtracts the (tiny) bump
    value at x = 0 exactly.  The default amplitude keeps the lens map
    single-branched (no folds) at the kernel pipelines' angular resolution.
    """
    b = GaussianBump(amp=amp, center=center, width=width)
    offset = float(b.eval(0.0))
    return RotSymProfile(
        PhiExpression(poly=(1.0 - offset, 0.0, -0.25), bumps=(b,)),
        x_max=2.0,
        name=f"h2bump[{amp},{center},{width}]",
    )


def metric_from_config(cfg: dict) -> AhmMetric:
    """Build a metric from the shared config schema.

    Schema: {"model": "h2" | "rotsym", "phi": expr, "x_max": real, "n": int}
    where expr = {"poly": [...], "bumps": [{"amp","center","width"}, ...]}.
    """
    model = cfg.get("model")
    n = int(cfg.get("n", 1))
    if n != 1:
        raise GeometryError("only n = 1 (boundary circle) metrics are configurable")
    if model == "h2":
        return h2_metric()
    if model == "rotsym":
        expr = cfg.get("phi")
        if not isinstance(expr, dict):
            raise GeometryError("rotsym model requires a 'phi' expression")
        bumps = tuple(
            GaussianBump(float(b["amp"]), float(b["center"]), float(b["width"]))
            for b in expr.get("bumps", [])
        )
        poly = tuple(float(c) for c in expr.get("poly", [1.0]))
        prof = RotSymProfile(
            PhiExpression(poly=poly, bumps=bumps),
            x_max=float(cfg.get("x_max", 2.0)),
            name="rotsym",
        )
        return AhmMetric(RotSymFamily(prof), model_tag=ModelTag.ROT_SYM_SURFACE)
    raise GeometryError(f"unknown metric model {model!r}")
