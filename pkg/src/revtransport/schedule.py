"""Derived constants, the shifted-drift schedule, and closed-form divergence bounds.

Everything here is a pure function of a :class:`ScheduleParams`.  Exponential
differences go through ``expm1``/``log1p`` because ``nu * T`` is often tiny
(for the double-well certificate nu is about 1e-2).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .potential import Certificate


@dataclass(frozen=True)
class ScheduleParams:
    T: float
    nu: float
    c0: float
    c1: float
    dist: float
    m_xx: float
    certificate: Certificate | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if not (self.nu > 0 and self.c0 > 0 and self.c1 > 0):
            raise ValueError("nu, c0, c1 must be positive")
        if self.dist < 0:
            raise ValueError(f"dist must be nonnegative, got {self.dist}")
        if self.m_xx < 1:
            raise ValueError(f"m_xx must be >= 1, got {self.m_xx}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("certificate")
        return d


def make_schedule(c: Certificate, T: float, dist: float) -> ScheduleParams:
    T = float(T)
    dist = float(dist)
    if not T > 0:
        raise ValueError(f"horizon T must be positive, got {T}")
    if dist < 0 or not math.isfinite(dist):
        raise ValueError(f"dist must be finite and nonnegative, got {dist}")
    a = c.R * c.R * (c.m + c.M)
    c0 = 0.5 * math.exp(-0.5 * a)
    m_xx = max(1.0, math.sqrt((c.R + 1.0) / dist)) if dist > 0 else 1.0
    return ScheduleParams(
        T=T,
        nu=c.m * c0,
        c0=c0,
        c1=math.exp(0.25 * a),
        dist=dist,
        m_xx=m_xx,
        certificate=c,
    )


def _check_t(sp: ScheduleParams, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > sp.T * (1 + 1e-12)) or np.any(np.isnan(t)):
        raise ValueError(f"t must lie in [0, T={sp.T}]")
    return np.minimum(t, sp.T)


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a


def eta_bar(sp: ScheduleParams, t):
    """Normalised drift strength 2 nu e^{nu t} / (c0 (e^{2 nu T} - 1))."""
    t = _check_t(sp, t)
    return _scalar(2.0 * sp.nu * np.exp(sp.nu * t) / (sp.c0 * math.expm1(2.0 * sp.nu * sp.T)))


def eta(sp: ScheduleParams, t):
    """Full drift strength sqrt(|x - x'|) * eta_bar(t)."""
    return _scalar(math.sqrt(sp.dist) * np.asarray(eta_bar(sp, t)))


def envelope(sp: ScheduleParams, t):
    """Upper envelope for E sqrt(f(|Z_t|)); vanishes at t = T."""
    t = _check_t(sp, t)
    frac = np.expm1(2.0 * sp.nu * t) / math.expm1(2.0 * sp.nu * sp.T)
    return _scalar(math.sqrt(sp.dist) * np.exp(-sp.nu * t) * np.maximum(1.0 - frac, 0.0))


def alpha(sp: ScheduleParams) -> float:
    x = sp.nu * sp.T
    return math.exp(x) / (sp.nu * math.expm1(2.0 * x))


def beta(sp: ScheduleParams) -> float:
    x = sp.nu * sp.T
    e2 = math.expm1(2.0 * x)
    return 4.0 * sp.nu**2 * math.exp(2.0 * x) / (sp.c0**2 * e2 * e2)


def _tail_factor(x: float) -> float:
    """(2u + 1) / (u + 1)^3 with u = e^x."""
    u = math.exp(x)
    return (2.0 * u + 1.0) / (u + 1.0) ** 3


def c_of_T(sp: ScheduleParams) -> float:
    """The horizon-dependent prefactor 2 c1 / (3 c0^2) * (2u+1)/(u+1)^3."""
    return 2.0 * sp.c1 / (3.0 * sp.c0**2) * _tail_factor(sp.nu * sp.T)


def j_value(sp: ScheduleParams) -> float:
    """Cost functional J evaluated at eta_bar (closed form)."""
    x = sp.nu * sp.T
    return 4.0 * sp.nu / (3.0 * sp.c0**2 * math.expm1(x)) * _tail_factor(x)


def moment_integral(sp: ScheduleParams, k: int) -> float:
    """int_0^T eta_bar^{2k} e^{-nu t} (1 - c0 int_0^t eta_bar e^{nu s} ds) dt."""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    k = int(k)
    nu, x = sp.nu, sp.nu * sp.T
    e2 = math.expm1(2.0 * x)
    scale = (4.0 * nu * nu / (sp.c0**2 * e2 * e2)) ** k / e2
    first = math.exp(2.0 * x) * math.expm1((2 * k - 1) * x) / ((2 * k - 1) * nu)
    second = math.expm1((2 * k + 1) * x) / ((2 * k + 1) * nu)
    return scale * (first - second)


def kl_bound(sp: ScheduleParams) -> float:
    if sp.dist == 0:
        return 0.0
    return c_of_T(sp) * sp.m_xx * sp.nu / math.expm1(sp.nu * sp.T) * sp.dist**2


def renyi_kappa(q: float) -> float:
    return (q - 1.0) + 2.0 * (q - 1.0) ** 2


def _log1p_a_expm1(a: float, b: float) -> float:
    """log(1 + a (e^b - 1)) for a > 0, b >= 0 without overflow."""
    if b < 700.0:
        return math.log1p(a * math.expm1(b))
    # 1 + a(e^b - 1) = a e^b (1 + (1/a - 1) e^{-b})
    return math.log(a) + b + math.log1p((1.0 / a - 1.0) * math.exp(-b))


def renyi_bound(sp: ScheduleParams, q: float) -> float:
    q = float(q)
    if not q > 1:
        raise ValueError(f"Renyi order must exceed 1 (q = 1 is kl_bound), got {q}")
    if sp.dist == 0:
        return 0.0
    a = sp.c1 * alpha(sp) / (sp.T * sp.m_xx)
    b = renyi_kappa(q) * sp.T * sp.m_xx**2 * sp.dist**2 * beta(sp)
    return _log1p_a_expm1(a, b) / (2.0 * (q - 1.0))


def renyi_leading_term(sp: ScheduleParams, q: float) -> float:
    """First-order behaviour of renyi_bound as q -> 1+ (small exponent)."""
    return 0.5 * sp.c1 * alpha(sp) * sp.m_xx * sp.dist**2 * beta(sp) * (1.0 + 2.0 * (q - 1.0))


@dataclass(frozen=True)
class BoundReport:
    kl_bound: float
    renyi_bounds: dict
    alpha: float
    beta: float
    c_of_T: float
    j_value: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["renyi_bounds"] = {repr(float(q)): v for q, v in self.renyi_bounds.items()}
        return d


def bounds(sp: ScheduleParams, qs=()) -> BoundReport:
    kl = kl_bound(sp)
    j = j_value(sp)
    if sp.dist > 0:
        via_j = 0.5 * sp.c1 * sp.m_xx * sp.dist**2 * j
        if not math.isclose(kl, via_j, rel_tol=1e-12):
            raise AssertionError(f"KL bound identity broken: {kl!r} vs {via_j!r}")
    return BoundReport(
        kl_bound=kl,
        renyi_bounds={float(q): renyi_bound(sp, q) for q in qs},
        alpha=alpha(sp),
        beta=beta(sp),
        c_of_T=c_of_T(sp),
        j_value=j,
    )


def constants_row(sp: ScheduleParams, qs=()) -> dict:
    """Flat record used by the ``constants`` CSV/JSON artifacts."""
    rep = bounds(sp, qs)
    row = {
        "T": sp.T,
        "nu": sp.nu,
        "c0": sp.c0,
        "c1": sp.c1,
        "m_xx": sp.m_xx,
        "kl_bound": rep.kl_bound,
    }
    for q, v in rep.renyi_bounds.items():
        row[f"renyi_{q:g}"] = v
    row.update(alpha=rep.alpha, beta=rep.beta, j_value=rep.j_value)
    return row


# -- quadrature cross-checks --------------------------------------------------


def _quad(fn, a, b):
    val, _ = integrate.quad(fn, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def _eta_bar_scalar(sp: ScheduleParams):
    amp = 2.0 * sp.nu / (sp.c0 * math.expm1(2.0 * sp.nu * sp.T))
    return lambda t: amp * math.exp(sp.nu * t)


def constraint_residual(sp: ScheduleParams) -> float:
    """c0 int_0^T eta_bar e^{nu s} ds - 1, by adaptive quadrature."""
    eb = _eta_bar_scalar(sp)
    return sp.c0 * _quad(lambda s: eb(s) * math.exp(sp.nu * s), 0.0, sp.T) - 1.0


def moment_integral_quad(sp: ScheduleParams, k: int) -> float:
    eb = _eta_bar_scalar(sp)

    # nested quadrature so the inner integral does not reuse any closed form
    def remaining(t):
        return 1.0 - sp.c0 * _quad(lambda s: eb(s) * math.exp(sp.nu * s), 0.0, t)

    return _quad(lambda t: eb(t) ** (2 * k) * math.exp(-sp.nu * t) * remaining(t), 0.0, sp.T)


def cross_check(sp: ScheduleParams, kmax: int = 5) -> dict:
    """Compare each closed form against quadrature; returns residuals and a pass flag."""
    out = {"constraint_residual": constraint_residual(sp)}
    j_closed = j_value(sp)
    j_quad = moment_integral_quad(sp, 1)
    out["j_rel_err"] = abs(j_quad - j_closed) / j_closed
    a, b = alpha(sp), beta(sp)
    moments = []
    for k in range(1, kmax + 1):
        closed = moment_integral(sp, k)
        quad = moment_integral_quad(sp, k)
        moments.append(
            {
                "k": k,
                "closed": closed,
                "quad_rel_err": abs(quad - closed) / abs(closed),
                "ab_bound": b**k * a,
                "within_ab_bound": closed <= b**k * a * (1 + 1e-12),
            }
        )
    out["moments"] = moments
    out["pass"] = bool(
        abs(out["constraint_residual"]) <= 1e-10
        and out["j_rel_err"] <= 1e-8
        and all(m["quad_rel_err"] <= 1e-8 and m["within_ab_bound"] for m in moments)
    )
    return out
