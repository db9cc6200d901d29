"""Potentials given by gradient evaluators, plus an empirical check of the
far-field convexity certificate (m, M, R).

Gradient callables are batched: they map an ``(n, d)`` array of points to an
``(n, d)`` array of gradients.  They must be pure so that path workers can
call them concurrently.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

GradFn = Callable[[np.ndarray], np.ndarray]
ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Certificate:
    """Constants (m, M, R) asserted for the monotonicity condition

        -(x - y).(grad U(x) - grad U(y)) <= -m |x - y|^2   if |x - y| > R
                                         <=  M |x - y|^2   if |x - y| <= R
    """

    m: float
    M: float
    R: float

    def __post_init__(self):
        for name in ("m", "M", "R"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"certificate {name} must be finite, got {v}")
        if not self.m > 0:
            raise ValueError(f"certificate requires m > 0, got m={self.m}")
        if self.M < self.m:
            raise ValueError(f"certificate requires M >= m, got M={self.M}, m={self.m}")
        if not self.R > 0:
            raise ValueError(f"certificate requires R > 0, got R={self.R}")

    def to_dict(self) -> dict:
        return {"m": self.m, "M": self.M, "R": self.R}


@dataclass(frozen=True)
class PotentialSpec:
    name: str
    dim: int
    grad: GradFn
    parameters: Mapping[str, float] = field(default_factory=dict)
    # Optional, used only for finite-difference checks.
    value: ValueFn | None = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")


def _quadratic_grad(x, kappa):
    return kappa * x


def _quadratic_value(x, kappa):
    return 0.5 * kappa * np.sum(x * x, axis=-1)


def _double_well_grad(x):
    sq = np.sum(x * x, axis=-1, keepdims=True)
    return 4.0 * sq * x - 2.0 * x


def _double_well_value(x):
    sq = np.sum(x * x, axis=-1)
    return sq * sq - sq


def quadratic(dim: int, kappa: float = 1.0) -> PotentialSpec:
    """U(x) = kappa |x|^2 / 2."""
    kappa = float(kappa)
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return PotentialSpec(
        name="quadratic",
        dim=dim,
        grad=functools.partial(_quadratic_grad, kappa=kappa),
        parameters={"kappa": kappa},
        value=functools.partial(_quadratic_value, kappa=kappa),
    )


def double_well(dim: int) -> PotentialSpec:
    """U(x) = |x|^4 - |x|^2, so grad U(x) = 4|x|^2 x - 2x."""
    return PotentialSpec(
        name="double_well",
        dim=dim,
        grad=_double_well_grad,
        parameters={},
        value=_double_well_value,
    )


BUILTINS: dict[str, Callable[..., PotentialSpec]] = {
    "quadratic": quadratic,
    "double_well": double_well,
}


def builtin(name: str, dim: int, parameters: Mapping[str, float] | None = None) -> PotentialSpec:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown potential {name!r}; known: {sorted(BUILTINS)}") from None
    return factory(dim, **dict(parameters or {}))


def grad(p: PotentialSpec, x) -> np.ndarray:
    """Gradient of ``p`` at a single point ``x`` (validated)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != p.dim:
        raise ValueError(f"expected a point of dimension {p.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point has non-finite components")
    return np.asarray(p.grad(x[None, :]), dtype=float)[0]


@dataclass(frozen=True)
class CertificateReport:
    passed: bool
    worst_near_margin: float
    worst_far_margin: float
    n_pairs: int
    seed: int
    n_stress_pairs: int
    radius: float

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "worst_near_margin": self.worst_near_margin,
            "worst_far_margin": self.worst_far_margin,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "n_stress_pairs": self.n_stress_pairs,
            "radius": self.radius,
        }


def _uniform_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radial = radius * rng.random(n) ** (1.0 / dim)
    return direction * radial[:, None]


def _stress_pairs(dim: int, R: float, radius: float, n_centres: int = 41):
    """Pairs with separation R - delta and R + delta along each axis."""
    delta = 1e-6 * max(1.0, R)
    half_span = max(radius - 0.5 * (R + delta), 0.0)
    offsets = np.linspace(-half_span, half_span, n_centres)
    xs, ys = [], []
    for axis in range(dim):
        unit = np.zeros(dim)
        unit[axis] = 1.0
        for sep in (R - delta, R + delta):
            for sign in (1.0, -1.0):
                centres = offsets[:, None] * unit[None, :]
                h = sign * 0.5 * sep * unit
                xs.append(centres + h)
                ys.append(centres - h)
    return np.concatenate(xs), np.concatenate(ys)


def monotonicity_lhs(p: PotentialSpec, x: np.ndarray, y: np.ndarray):
    """Return (-(x-y).(grad U(x) - grad U(y)), |x-y|^2) for row-paired points."""
    h = x - y
    dg = np.asarray(p.grad(x)) - np.asarray(p.grad(y))
    return -np.sum(h * dg, axis=1), np.sum(h * h, axis=1)


def verify_certificate(
    p: PotentialSpec,
    c: Certificate,
    n_pairs: int = 10_000,
    radius: float | None = None,
    seed: int = 0,
    tol: float = 1e-9,
) -> CertificateReport:
    """Empirically check ``c`` against ``p`` on random and stress pairs.

    Margins are ``M r^2 - lhs`` on the near branch and ``-m r^2 - lhs`` on the
    far branch; a negative margin is a violation.  A pair fails only when its
    margin is below ``-tol * (1 + r^2)``.  A failed certificate is a normal
    report, not an exception.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    if radius is None:
        radius = max(5.0, 3.0 * c.R)
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")

    rng = np.random.default_rng(seed)
    x = _uniform_ball(rng, n_pairs, p.dim, radius)
    y = _uniform_ball(rng, n_pairs, p.dim, radius)
    sx, sy = _stress_pairs(p.dim, c.R, radius)
    x = np.concatenate([x, sx])
    y = np.concatenate([y, sy])

    lhs, r2 = monotonicity_lhs(p, x, y)
    near = r2 <= c.R * c.R
    near_margin = c.M * r2[near] - lhs[near]
    far_margin = -c.m * r2[~near] - lhs[~near]

    worst_near = float(near_margin.min()) if near_margin.size else float("inf")
    worst_far = float(far_margin.min()) if far_margin.size else float("inf")
    ok_near = bool(np.all(near_margin >= -tol * (1.0 + r2[near])))
    ok_far = bool(np.all(far_margin >= -tol * (1.0 + r2[~near])))
    return CertificateReport(
        passed=ok_near and ok_far and bool(np.all(np.isfinite(lhs))),
        worst_near_margin=worst_near,
        worst_far_margin=worst_far,
        n_pairs=n_pairs,
        seed=seed,
        n_stress_pairs=int(sx.shape[0]),
        radius=float(radius),
    )
