"""Reflection/synchronous coupling of X, the shifted interpolation X'' and the
reference chain X', discretised by tamed Euler-Maruyama.

Per step, with Z = X - X'' and e = Z/|Z|:

    dB    = rc(|Z|) xi_rc + sc(|Z|) xi_sc
    dBbar = rc(|Z|) (I - 2 e e^T) xi_rc + sc(|Z|) xi_sc      (dB once coupled)
    X   <- X   - tame(grad U(X))   dt + dB
    X'  <- X'  - tame(grad U(X'))  dt + dBbar
    X'' <- X'' - tame(grad U(X'')) dt + min(eta_t sqrt|Z| dt, |Z|) e + dBbar

rc, sc and e are frozen at the start of the step (Ito convention).

Every path owns a Philox stream keyed by (seed, stream, path index), so a
path's trajectory does not depend on how paths are grouped into blocks or
spread across workers.  Blocks have a fixed size and are reduced in block
order, which keeps the aggregated statistics bit-stable.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import schedule as sched
from .lyapunov import LyapunovF, f_eval
from .potential import Certificate, PotentialSpec

_R_MIN = 1e-12
DIVERGED_FRACTION_LIMIT = 1e-3
LEMMA_SLACK = 0.05


@dataclass(frozen=True)
class CutoffPair:
    """rc = cos(pi/2 s(u)), sc = sin(pi/2 s(u)) with s the cubic smoothstep of
    u = (r - R)/width clamped to [0, 1]."""

    R: float
    width: float = 1.0

    def __post_init__(self):
        if not (self.R > 0 and self.width > 0):
            raise ValueError("cutoff needs R > 0 and width > 0")

    def _angle(self, r):
        u = np.clip((r - self.R) / self.width, 0.0, 1.0)
        return 0.5 * np.pi * u * u * (3.0 - 2.0 * u)


def _check_r(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("r must be nonnegative")
    return r


def rc_eval(c: CutoffPair, r):
    out = np.cos(c._angle(_check_r(r)))
    return out if out.ndim else float(out)


def sc_eval(c: CutoffPair, r):
    out = np.sin(c._angle(_check_r(r)))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SimConfig:
    potential: PotentialSpec
    certificate: Certificate
    x0: tuple
    x0_prime: tuple
    T: float
    dt: float
    n_paths: int
    seed: int
    eps_couple: float | None = None
    cutoff_width: float = 1.0
    shifted_drift: bool = True
    track_x_prime: bool = True
    block_size: int = 4096
    chunk_steps: int = 512

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))
        object.__setattr__(self, "x0_prime", tuple(float(v) for v in np.ravel(self.x0_prime)))
        d = self.potential.dim
        if len(self.x0) != d or len(self.x0_prime) != d:
            raise ValueError(f"initial points must have dimension {d}")
        if not (np.all(np.isfinite(self.x0)) and np.all(np.isfinite(self.x0_prime))):
            raise ValueError("initial points must be finite")
        if not (self.T > 0 and 0 < self.dt < self.T):
            raise ValueError(f"need 0 < dt < T, got dt={self.dt}, T={self.T}")
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.eps_couple is not None and not self.eps_couple > 0:
            raise ValueError("eps_couple must be positive")
        if self.block_size < 1 or self.chunk_steps < 1:
            raise ValueError("block_size and chunk_steps must be >= 1")

    @property
    def dist(self) -> float:
        return float(np.linalg.norm(np.subtract(self.x0, self.x0_prime)))

    @property
    def n_steps(self) -> int:
        return round(self.T / self.dt)

    @property
    def eps(self) -> float:
        if self.eps_couple is not None:
            return float(self.eps_couple)
        return 1e-4 * max(1.0, self.dist)

    @property
    def cutoff(self) -> CutoffPair:
        return CutoffPair(self.certificate.R, self.cutoff_width)

    @property
    def lemma_bound(self) -> float:
        """Discrete surrogate of the almost-sure bound on |Z_t|."""
        return max(self.dist, self.certificate.R + self.cutoff_width) + LEMMA_SLACK


@dataclass
class CouplingState:
    t: float
    x: np.ndarray
    x_pp: np.ndarray
    x_p: np.ndarray
    coupled: bool = False
    girsanov_acc: float = 0.0
    sup_z: float = 0.0
    diverged: bool = False

    @classmethod
    def initial(cls, cfg: SimConfig) -> "CouplingState":
        x = np.array(cfg.x0)
        xp = np.array(cfg.x0_prime)
        r = float(np.linalg.norm(x - xp))
        return cls(t=0.0, x=x, x_pp=xp.copy(), x_p=xp, coupled=r == 0.0, sup_z=r)


def path_generator(seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one path; independent of every other path."""
    key = np.random.SeedSequence([int(seed), int(stream), int(path_index)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _tame(g: np.ndarray, dt: float) -> np.ndarray:
    return g / (1.0 + dt * np.sqrt(np.sum(g * g, axis=1, keepdims=True)))


def _norm(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(z * z, axis=1))


class _Arrays:
    """Vectorised state of a block of paths."""

    def __init__(self, x, x_pp, x_p, coupled, acc, sup_z, diverged):
        self.x = x
        self.x_pp = x_pp
        self.x_p = x_p
        self.coupled = coupled
        self.acc = acc
        self.sup_z = sup_z
        self.diverged = diverged


def _advance(st: _Arrays, t: float, cfg: SimConfig, sp: sched.ScheduleParams, xi_rc, xi_sc):
    """One tamed Euler-Maruyama step of the coupled triple, in place."""
    dt = cfg.dt
    sq = math.sqrt(dt)
    t_next = min(t + dt, cfg.T)
    if cfg.shifted_drift and sp.dist > 0:
        eta_now = float(sched.eta(sp, min(t, cfg.T)))
        eta_next = float(sched.eta(sp, t_next))
    else:
        eta_now = eta_next = 0.0

    live = ~st.diverged
    z = st.x - st.x_pp
    r = _norm(z)
    active = live & ~st.coupled & (r >= _R_MIN)
    e = np.where(active[:, None], z / np.where(r > 0, r, 1.0)[:, None], 0.0)

    cut = cfg.cutoff
    rc = np.where(st.coupled, 1.0, rc_eval(cut, r))[:, None]
    sc = np.where(st.coupled, 0.0, sc_eval(cut, r))[:, None]
    d_rc = sq * xi_rc
    d_sc = sq * xi_sc
    dB = rc * d_rc + sc * d_sc
    # e = 0 on inactive rows, so the reflection collapses to dB there
    dBbar = rc * (d_rc - 2.0 * np.sum(e * d_rc, axis=1, keepdims=True) * e) + sc * d_sc

    x_new = st.x - _tame(cfg.potential.grad(st.x), dt) * dt + dB
    if cfg.track_x_prime:
        xp_new = st.x_p - _tame(cfg.potential.grad(st.x_p), dt) * dt + dBbar
    else:
        xp_new = st.x_p
    shift = np.minimum(eta_now * np.sqrt(r) * dt, r)[:, None] * e
    xpp_new = st.x_pp - _tame(cfg.potential.grad(st.x_pp), dt) * dt + shift + dBbar
    xpp_new = np.where(st.coupled[:, None], x_new, xpp_new)

    z_new = x_new - xpp_new
    r_new = _norm(z_new)
    # Meeting: inside the declaration radius, or the difference crossed through
    # zero along e during the step (the continuous path must have hit zero).
    crossed = active & (np.sum(z_new * e, axis=1) <= 0.0)
    newly = ~st.coupled & ((r_new <= cfg.eps) | crossed)
    coupled_next = st.coupled | newly

    r_eff_now = np.where(st.coupled, 0.0, r)
    r_eff_next = np.where(coupled_next, 0.0, r_new)
    d_acc = 0.5 * dt * (eta_now**2 * r_eff_now + eta_next**2 * r_eff_next)

    finite = (
        np.all(np.isfinite(x_new), axis=1)
        & np.all(np.isfinite(xpp_new), axis=1)
        & np.all(np.isfinite(xp_new), axis=1)
        & np.isfinite(d_acc)
    )
    ok = live & finite
    newly_diverged = live & ~finite

    xpp_new = np.where(newly[:, None], x_new, xpp_new)
    okc = ok[:, None]
    st.x = np.where(okc, x_new, st.x)
    st.x_pp = np.where(okc, xpp_new, st.x_pp)
    st.x_p = np.where(okc, xp_new, st.x_p)
    st.coupled = np.where(ok, coupled_next, st.coupled)
    st.acc = np.where(ok, st.acc + d_acc, st.acc)
    st.sup_z = np.where(ok, np.maximum(st.sup_z, r_new), st.sup_z)
    st.diverged = st.diverged | newly_diverged


def step(state: CouplingState, cfg: SimConfig, sp: sched.ScheduleParams, noise) -> CouplingState:
    """Advance a single path by one step given standard Gaussian (xi_rc, xi_sc)."""
    if state.t + cfg.dt > cfg.T + 1e-12:
        raise ValueError(f"step would pass the horizon: t={state.t}, dt={cfg.dt}, T={cfg.T}")
    xi_rc, xi_sc = (np.asarray(v, dtype=float).reshape(1, -1) for v in noise)
    d = cfg.potential.dim
    if xi_rc.shape[1] != d or xi_sc.shape[1] != d:
        raise ValueError(f"noise vectors must have dimension {d}")
    st = _Arrays(
        x=state.x.reshape(1, -1).astype(float),
        x_pp=state.x_pp.reshape(1, -1).astype(float),
        x_p=state.x_p.reshape(1, -1).astype(float),
        coupled=np.array([state.coupled]),
        acc=np.array([state.girsanov_acc]),
        sup_z=np.array([state.sup_z]),
        diverged=np.array([state.diverged]),
    )
    _advance(st, state.t, cfg, sp, xi_rc, xi_sc)
    return CouplingState(
        t=min(state.t + cfg.dt, cfg.T),
        x=st.x[0],
        x_pp=st.x_pp[0],
        x_p=st.x_p[0],
        coupled=bool(st.coupled[0]),
        girsanov_acc=float(st.acc[0]),
        sup_z=float(st.sup_z[0]),
        diverged=bool(st.diverged[0]),
    )


def grid_steps(n_steps: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


@dataclass
class _BlockResult:
    sums: np.ndarray  # (3, 2, n_grid): quantity x (sum, sum of squares) x grid
    acc: np.ndarray
    sup_z: np.ndarray
    coupled: np.ndarray
    diverged: np.ndarray
    x_T: np.ndarray
    xp_T: np.ndarray


def _run_block(cfg: SimConfig, sp: sched.ScheduleParams, lo: int, hi: int, stride: int) -> _BlockResult:
    n = hi - lo
    d = cfg.potential.dim
    gens = [path_generator(cfg.seed, i) for i in range(lo, hi)]
    lf = LyapunovF.from_certificate(cfg.certificate)
    x0 = np.broadcast_to(np.array(cfg.x0), (n, d)).copy()
    xp0 = np.broadcast_to(np.array(cfg.x0_prime), (n, d)).copy()
    r0 = float(np.linalg.norm(np.subtract(cfg.x0, cfg.x0_prime)))
    st = _Arrays(
        x=x0,
        x_pp=xp0.copy(),
        x_p=xp0,
        coupled=np.full(n, r0 == 0.0),
        acc=np.zeros(n),
        sup_z=np.full(n, r0),
        diverged=np.zeros(n, dtype=bool),
    )
    grid = grid_steps(cfg.n_steps, stride)
    sums = np.zeros((3, 2, grid.size))
    slot = 0

    def record():
        nonlocal slot
        live = ~st.diverged
        r = np.where(st.coupled, 0.0, _norm(st.x - st.x_pp))[live]
        fz = f_eval(lf, r)
        for q, vals in enumerate((r, np.sqrt(fz), fz)):
            sums[q, 0, slot] = vals.sum()
            sums[q, 1, slot] = (vals * vals).sum()
        slot += 1

    record()
    k = 0
    while k < cfg.n_steps:
        m = min(cfg.chunk_steps, cfg.n_steps - k)
        noise = np.stack([g.standard_normal((m, 2, d)) for g in gens], axis=1)
        for j in range(m):
            _advance(st, k * cfg.dt, cfg, sp, noise[j, :, 0, :], noise[j, :, 1, :])
            k += 1
            if slot < grid.size and grid[slot] == k:
                record()
    return _BlockResult(
        sums=sums,
        acc=st.acc,
        sup_z=st.sup_z,
        coupled=st.coupled,
        diverged=st.diverged,
        x_T=st.x,
        xp_T=st.x_p,
    )


def _run_block_args(args):
    return _run_block(*args)


def default_workers() -> int:
    return max(1, int(os.environ.get("REVTRANSPORT_WORKERS", "1")))


def _map_blocks(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class TrajectoryStats:
    grid: np.ndarray
    mean_abs_z: np.ndarray
    se_abs_z: np.ndarray
    mean_sqrt_f_z: np.ndarray
    se_sqrt_f_z: np.ndarray
    mean_f_z: np.ndarray
    se_f_z: np.ndarray
    coupled_fraction_at_T: float
    max_sup_z: float
    girsanov_integral: float
    girsanov_se: float
    per_path_girsanov: np.ndarray = field(repr=False)
    per_path_sup_z: np.ndarray = field(repr=False)
    x_T: np.ndarray = field(repr=False)
    xp_T: np.ndarray = field(repr=False)
    n_paths: int = 0
    n_diverged: int = 0
    T: float = 0.0
    dt: float = 0.0
    dist: float = 0.0
    lemma_bound: float = 0.0

    @property
    def failed(self) -> bool:
        return self.n_diverged > DIVERGED_FRACTION_LIMIT * self.n_paths

    @property
    def n_lemma_violations(self) -> int:
        return int(np.sum(self.per_path_sup_z > self.lemma_bound))

    def summary(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "n_diverged": self.n_diverged,
            "failed": self.failed,
            "coupled_fraction_at_T": self.coupled_fraction_at_T,
            "max_sup_z": self.max_sup_z,
            "lemma_bound": self.lemma_bound,
            "n_lemma_violations": self.n_lemma_violations,
            "girsanov_integral": self.girsanov_integral,
            "girsanov_se": self.girsanov_se,
        }


def _mean_se(total, total_sq, n):
    mean = total / n
    if n < 2:
        return mean, np.zeros_like(mean)
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, np.sqrt(var / n)


def simulate(cfg: SimConfig, sp: sched.ScheduleParams, grid_stride: int = 1, workers: int = 1) -> TrajectoryStats:
    """Run ``cfg.n_paths`` coupled paths and aggregate statistics on a time grid."""
    if grid_stride < 1:
        raise ValueError("grid_stride must be >= 1")
    if not math.isclose(sp.T, cfg.T, rel_tol=1e-12) or not math.isclose(sp.dist, cfg.dist, rel_tol=1e-12, abs_tol=1e-15):
        raise ValueError("schedule horizon/distance does not match the simulation config")
    tasks = [
        (cfg, sp, lo, min(lo + cfg.block_size, cfg.n_paths), grid_stride)
        for lo in range(0, cfg.n_paths, cfg.block_size)
    ]
    blocks = _map_blocks(_run_block_args, tasks, workers)

    sums = np.zeros_like(blocks[0].sums)
    for b in blocks:
        sums += b.sums
    acc = np.concatenate([b.acc for b in blocks])
    sup_z = np.concatenate([b.sup_z for b in blocks])
    coupled = np.concatenate([b.coupled for b in blocks])
    diverged = np.concatenate([b.diverged for b in blocks])
    live = ~diverged
    n_live = int(live.sum())
    if n_live == 0:
        raise RuntimeError("every path diverged")

    stats = [_mean_se(sums[q, 0], sums[q, 1], n_live) for q in range(3)]
    g_mean, g_se = _mean_se(acc[live].sum(), (acc[live] ** 2).sum(), n_live)
    return TrajectoryStats(
        grid=grid_steps(cfg.n_steps, grid_stride) * cfg.dt,
        mean_abs_z=stats[0][0],
        se_abs_z=stats[0][1],
        mean_sqrt_f_z=stats[1][0],
        se_sqrt_f_z=stats[1][1],
        mean_f_z=stats[2][0],
        se_f_z=stats[2][1],
        coupled_fraction_at_T=float(coupled[live].mean()),
        max_sup_z=float(sup_z[live].max()),
        girsanov_integral=float(g_mean),
        girsanov_se=float(g_se),
        per_path_girsanov=acc[live],
        per_path_sup_z=sup_z[live],
        x_T=np.concatenate([b.x_T for b in blocks])[live],
        xp_T=np.concatenate([b.xp_T for b in blocks])[live],
        n_paths=cfg.n_paths,
        n_diverged=int(diverged.sum()),
        T=cfg.T,
        dt=cfg.dt,
        dist=cfg.dist,
        lemma_bound=cfg.lemma_bound,
    )


# -- uncoupled endpoint sampling ---------------------------------------------


def _endpoint_block(potential, x0, T, dt, seed, stream, lo, hi, chunk_steps):
    n = hi - lo
    d = potential.dim
    n_steps = round(T / dt)
    gens = [path_generator(seed, i, stream) for i in range(lo, hi)]
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, d)).copy()
    sq = math.sqrt(dt)
    k = 0
    while k < n_steps:
        m = min(chunk_steps, n_steps - k)
        noise = np.stack([g.standard_normal((m, d)) for g in gens], axis=1)
        for j in range(m):
            x = x - _tame(potential.grad(x), dt) * dt + sq * noise[j]
        k += m
    return x


def _endpoint_block_args(args):
    return _endpoint_block(*args)


def sample_endpoints(
    potential: PotentialSpec,
    x0,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    stream: int = 1,
    workers: int = 1,
    block_size: int = 4096,
    chunk_steps: int = 512,
) -> np.ndarray:
    """Endpoints X_T of independent tamed Euler-Maruyama chains started at ``x0``.

    ``stream`` separates these draws from the coupled simulation (stream 0).
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape[0] != potential.dim:
        raise ValueError(f"x0 must have dimension {potential.dim}")
    n_steps = round(T / dt)
    if not (T > 0 and 0 < dt <= T) or abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive integer multiple of dt")
    tasks = [
        (potential, x0, T, dt, seed, stream, lo, min(lo + block_size, n_paths), chunk_steps)
        for lo in range(0, n_paths, block_size)
    ]
    out = np.concatenate(_map_blocks(_endpoint_block_args, tasks, workers))
    if not np.all(np.isfinite(out)):
        raise RuntimeError("non-finite endpoint in uncoupled run")
    return out


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
