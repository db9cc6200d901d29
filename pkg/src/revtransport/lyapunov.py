"""Concave distance transform f(r) = int_0^r exp(-C_f min(s, R_f)) ds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .potential import Certificate


@dataclass(frozen=True)
class LyapunovF:
    C_f: float
    R_f: float

    def __post_init__(self):
        if not (self.C_f > 0 and self.R_f > 0):
            raise ValueError(f"C_f and R_f must be positive, got C_f={self.C_f}, R_f={self.R_f}")

    @classmethod
    def from_certificate(cls, c: Certificate) -> "LyapunovF":
        return cls(C_f=0.5 * c.R * (c.M + c.m), R_f=c.R)

    @property
    def slope_floor(self) -> float:
        """exp(-C_f R_f): the slope of f beyond R_f and its lower linear bound."""
        return float(np.exp(-self.C_f * self.R_f))

    def __call__(self, r):
        return f_eval(self, r)


def _check_r(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("r must be nonnegative")
    return r


def f_eval(lf: LyapunovF, r):
    r = _check_r(r)
    inner = np.minimum(r, lf.R_f)
    # -expm1 keeps (1 - e^{-C r})/C accurate as r -> 0
    out = -np.expm1(-lf.C_f * inner) / lf.C_f + lf.slope_floor * np.maximum(r - lf.R_f, 0.0)
    return out if out.ndim else float(out)


def f_deriv(lf: LyapunovF, r):
    r = _check_r(r)
    out = np.exp(-lf.C_f * np.minimum(r, lf.R_f))
    return out if out.ndim else float(out)
