"""Monte Carlo estimates of the Girsanov divergence budgets and the
Donsker-Varadhan / Harnack duality checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, rel_entr

from . import schedule as sched
from .coupling import TrajectoryStats


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RenyiEstimate:
    q: float
    value: float
    ci_lo: float
    ci_hi: float
    heavy_tail: bool
    n_paths: int

    @property
    def upper_margin(self) -> float:
        return self.ci_hi - self.value

    def to_dict(self) -> dict:
        return asdict(self)


def kl_girsanov_estimate(stats: TrajectoryStats, sp: sched.ScheduleParams) -> Estimate:
    """Half the mean accumulated Girsanov budget int_0^T eta_t^2 |Z_t| dt."""
    if not math.isclose(stats.T, sp.T, rel_tol=1e-12):
        raise ValueError(f"stats horizon {stats.T} does not match schedule horizon {sp.T}")
    return Estimate(0.5 * stats.girsanov_integral, 0.5 * stats.girsanov_se)


def _log_mean_exp(v: np.ndarray) -> float:
    return float(logsumexp(v) - math.log(v.size))


def renyi_girsanov_estimate(
    per_path_integrals,
    sp: sched.ScheduleParams | None,
    q: float,
    n_boot: int = 1000,
    seed: int = 0,
    confidence: float = 0.95,
) -> RenyiEstimate:
    """(1 / (2(q-1))) log mean exp(kappa_q I) over paths, with a percentile
    bootstrap interval.

    The heavy-tail flag is raised when the top 1% of paths carry more than half
    of the empirical mean of exp(kappa_q I).
    """
    q = float(q)
    if not q > 1:
        raise ValueError(f"Renyi order must exceed 1, got {q}")
    ints = np.asarray(per_path_integrals, dtype=float)
    if ints.ndim != 1 or ints.size == 0:
        raise ValueError("per_path_integrals must be a non-empty 1-d sequence")
    if np.any(ints < 0) or not np.all(np.isfinite(ints)):
        raise ValueError("per-path integrals must be finite and nonnegative")
    del sp  # orientation/horizon live in the caller; kept for a uniform signature
    kappa = sched.renyi_kappa(q)
    scale = 1.0 / (2.0 * (q - 1.0))
    v = kappa * ints
    value = scale * _log_mean_exp(v)

    w = np.exp(v - v.max())
    top = max(1, math.ceil(0.01 * w.size))
    heavy = bool(np.sort(w)[-top:].sum() > 0.5 * w.sum()) if w.size >= 100 else False

    if n_boot > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        boots = np.empty(n_boot)
        for lo in range(0, n_boot, 100):
            hi = min(lo + 100, n_boot)
            idx = rng.integers(0, v.size, size=(hi - lo, v.size))
            boots[lo:hi] = scale * (logsumexp(v[idx], axis=1) - math.log(v.size))
        a = 0.5 * (1.0 - confidence)
        lo, hi = np.quantile(boots, [a, 1.0 - a])
        lo, hi = min(float(lo), value), max(float(hi), value)
    else:
        lo = hi = value
    return RenyiEstimate(q=q, value=value, ci_lo=lo, ci_hi=hi, heavy_tail=heavy, n_paths=int(v.size))


def _as_distribution(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be finite and nonnegative")
    s = p.sum()
    if not math.isclose(s, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"{name} must sum to 1, sums to {s}")
    return p


def dv_duality_check(p, r, phi) -> float:
    """Slack KL(p||r) + log sum r e^phi - sum p phi of the Donsker-Varadhan bound.

    Nonnegative for every phi; zero iff phi = log(p/r) + const on supp p.
    """
    p = _as_distribution(p, "p")
    r = _as_distribution(r, "r")
    phi = np.asarray(phi, dtype=float)
    if not (p.shape == r.shape == phi.shape):
        raise ValueError("p, r and phi must share the same support")
    if np.any((p > 0) & (r == 0)):
        raise ValueError("p is not absolutely continuous with respect to r")
    if not np.all(np.isfinite(phi)):
        raise ValueError("phi must be finite")
    kl = float(np.sum(rel_entr(p, r)))
    pos = r > 0
    log_mgf = float(logsumexp(phi[pos], b=r[pos]))
    return kl + log_mgf - float(np.dot(p, phi))


@dataclass
class HarnackReport:
    log_lhs: float
    log_rhs: float
    log_margin: float
    log_se: float
    log_pass: bool
    log_constant: float
    power_lhs: float | None = None
    power_rhs: float | None = None
    power_margin: float | None = None
    power_se: float | None = None
    power_pass: bool | None = None
    power_constant: float | None = None
    q_prime: float | None = None
    n_x: int = 0
    n_xp: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _se(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def harnack_check(
    samples_x,
    samples_xp,
    sp: sched.ScheduleParams,
    phi: Callable[[np.ndarray], np.ndarray],
    q_prime: float | None = None,
    n_se: float = 3.0,
) -> HarnackReport:
    """Empirical log-Harnack (and, if ``q_prime`` is given, power-Harnack) check.

    log:   E phi(X_T^x) <= C(x, x', T) + log E exp(phi(X_T^{x'}))
    power: E phi(X_T^x) <= C_q' (E phi(X_T^{x'})^q')^{1/q'},
           C_q' = exp((q-1)/q * renyi_bound(q)),  q = q'/(q'-1)

    Right-hand standard errors use the delta method.  A side passes when its
    margin is at least ``-n_se`` combined standard errors.
    """
    sx = np.asarray(samples_x, dtype=float)
    sxp = np.asarray(samples_xp, dtype=float)
    if sx.ndim == 1:
        sx = sx[:, None]
    if sxp.ndim == 1:
        sxp = sxp[:, None]
    fx = np.asarray(phi(sx), dtype=float).ravel()
    fxp = np.asarray(phi(sxp), dtype=float).ravel()
    if fx.size != sx.shape[0] or fxp.size != sxp.shape[0]:
        raise ValueError("phi must return one value per sample")
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fxp))):
        raise ValueError("phi must be bounded (finite) on every sample")

    lhs = float(fx.mean())
    se_l = _se(fx)

    C = sched.kl_bound(sp)
    shift = fxp.max()
    w = np.exp(fxp - shift)
    log_rhs = C + shift + math.log(w.mean())
    se_r = _se(w) / float(w.mean())
    se = math.hypot(se_l, se_r)
    margin = log_rhs - lhs
    rep = HarnackReport(
        log_lhs=lhs,
        log_rhs=log_rhs,
        log_margin=margin,
        log_se=se,
        log_pass=bool(margin >= -n_se * se),
        log_constant=C,
        n_x=int(fx.size),
        n_xp=int(fxp.size),
    )

    if q_prime is not None:
        q_prime = float(q_prime)
        if not q_prime > 1:
            raise ValueError(f"q_prime must exceed 1, got {q_prime}")
        if np.any(fxp <= 0) or np.any(fx <= 0):
            rep.notes.append("power-Harnack skipped: phi is not positive on the samples")
            return rep
        q = q_prime / (q_prime - 1.0)
        log_cq = (q - 1.0) / q * sched.renyi_bound(sp, q)
        moment = fxp**q_prime
        m = float(moment.mean())
        norm = m ** (1.0 / q_prime)
        # overflow-safe for huge constants: compare on the log scale when needed
        if log_cq < 700:
            cq = math.exp(log_cq)
            p_rhs = cq * norm
            p_se = math.hypot(se_l, cq * norm / (q_prime * m) * _se(moment))
        else:
            cq = math.inf
            p_rhs = math.inf
            p_se = se_l
        rep.power_lhs = lhs
        rep.power_rhs = p_rhs
        rep.power_margin = p_rhs - lhs
        rep.power_se = p_se
        rep.power_pass = bool(rep.power_margin >= -n_se * p_se)
        rep.power_constant = cq
        rep.q_prime = q_prime
    return rep


@dataclass
class DivergenceReport:
    kl_mc: Estimate
    kl_theorem: float
    renyi_mc: dict
    renyi_theorem: dict
    n_paths: int
    notes: list = field(default_factory=list)

    @property
    def kl_ok(self) -> bool:
        return self.kl_mc.value <= self.kl_theorem + 3.0 * self.kl_mc.se

    def renyi_ok(self) -> dict:
        return {q: est.value <= self.renyi_theorem[q] + est.upper_margin for q, est in self.renyi_mc.items()}

    def to_dict(self) -> dict:
        return {
            "kl_mc": self.kl_mc.value,
            "kl_mc_se": self.kl_mc.se,
            "kl_theorem": self.kl_theorem,
            "kl_ok": self.kl_ok,
            "renyi": [
                {
                    "q": q,
                    "renyi_mc": est.value,
                    "ci_lo": est.ci_lo,
                    "ci_hi": est.ci_hi,
                    "heavy_tail": est.heavy_tail,
                    "renyi_theorem": self.renyi_theorem[q],
                    "ok": ok,
                }
                for (q, est), ok in zip(self.renyi_mc.items(), self.renyi_ok().values())
            ],
            "n_paths": self.n_paths,
            "notes": list(self.notes),
        }

    def renyi_rows(self) -> list[dict]:
        return [
            {
                "q": q,
                "renyi_mc": est.value,
                "ci_lo": est.ci_lo,
                "ci_hi": est.ci_hi,
                "renyi_theorem": self.renyi_theorem[q],
            }
            for q, est in self.renyi_mc.items()
        ]


def divergence_report(
    stats: TrajectoryStats,
    sp: sched.ScheduleParams,
    qs=(),
    n_boot: int = 1000,
    seed: int = 0,
) -> DivergenceReport:
    kl = kl_girsanov_estimate(stats, sp)
    renyi = {}
    notes = []
    for i, q in enumerate(qs):
        est = renyi_girsanov_estimate(stats.per_path_girsanov, sp, q, n_boot=n_boot, seed=seed + i)
        renyi[float(q)] = est
        if est.heavy_tail:
            notes.append(f"heavy tail at q={q:g}: top 1% of paths carry over half of the mean")
    # The drift is attached to X'', so the budget bounds R_q(law X'_T || law X_T);
    # the closed-form bound is symmetric in the two starting points.
    return DivergenceReport(
        kl_mc=kl,
        kl_theorem=sched.kl_bound(sp),
        renyi_mc=renyi,
        renyi_theorem={float(q): sched.renyi_bound(sp, q) for q in qs},
        n_paths=int(stats.per_path_girsanov.size),
        notes=notes,
    )
