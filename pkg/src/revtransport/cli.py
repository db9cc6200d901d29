"""Experiment runner.

    revtransport SUBCOMMAND --config cfg.json [--set key=value ...]
                 [--workers N] [--fixed-label LABEL] [--out DIR]

Exit status: 0 success, 1 internal error, 2 invalid config, 3 a check failed.
Every failure also writes ``error-<label>.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import schedule as sched
from .coupling import SimConfig, default_workers, sample_endpoints, simulate
from .divergence import divergence_report, dv_duality_check, harnack_check
from .potential import Certificate, builtin, verify_certificate

SUBCOMMANDS = ("constants", "schedule-verify", "potential-check", "simulate", "bounds", "renyi", "harnack", "all")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_CHECK = 0, 1, 2, 3

DEFAULTS = {
    "potential": {
        "name": "double_well",
        "dim": 1,
        "parameters": {},
        "certificate": {"m": 0.4, "M": 2.0, "R": 1.55},
    },
    "x0": [-0.5],
    "x0_prime": [0.5],
    "T": 1.0,
    "dt": 0.001,
    "n_paths": 10000,
    "seed": 20240611,
    "q_list": [1.1, 2.0, 4.0],
    "grid_stride": 10,
    "eps_couple": None,
    "cutoff_width": 1.0,
    "output_dir": "out",
    "run_x_prime": True,
    "harnack_check": True,
    "harnack_paths": 10000,
    "harnack_phi": "tanh",
    "harnack_power_phi": "tanh_plus_2",
    "harnack_q_prime": 2.0,
    "dv_triples": 10000,
    "bootstrap_resamples": 1000,
    "certificate_pairs": 20000,
    "certificate_radius": None,
}

TEST_FUNCTIONS = {
    "tanh": lambda x: np.tanh(x[:, 0]),
    "tanh_plus_2": lambda x: 2.0 + np.tanh(x[:, 0]),
    "cos": lambda x: np.cos(x[:, 0]),
    "constant": lambda x: np.ones(x.shape[0]),
}


class ConfigError(ValueError):
    pass


class CheckFailed(Exception):
    pass


# -- config ------------------------------------------------------------------


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a mapping")
    node[parts[-1]] = _parse_value(text)


def load_config(path, overrides=()) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    for a in overrides:
        apply_override(cfg, a)
    return cfg


class Experiment:
    """Validated view of a merged config; construction fails before any compute."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        try:
            pot = cfg["potential"]
            self.potential = builtin(pot["name"], int(pot["dim"]), pot.get("parameters") or {})
            self.certificate = Certificate(**{k: float(v) for k, v in pot["certificate"].items()})
            self.qs = [float(q) for q in cfg["q_list"]]
            if any(not q > 1 for q in self.qs):
                raise ConfigError("every q in q_list must exceed 1")
            self.sim = SimConfig(
                potential=self.potential,
                certificate=self.certificate,
                x0=cfg["x0"],
                x0_prime=cfg["x0_prime"],
                T=float(cfg["T"]),
                dt=float(cfg["dt"]),
                n_paths=int(cfg["n_paths"]),
                seed=int(cfg["seed"]),
                eps_couple=None if cfg["eps_couple"] is None else float(cfg["eps_couple"]),
                cutoff_width=float(cfg["cutoff_width"]),
                track_x_prime=bool(cfg["run_x_prime"]),
            )
            self.schedule = sched.make_schedule(self.certificate, self.sim.T, self.sim.dist)
            self.grid_stride = int(cfg["grid_stride"])
            if self.grid_stride < 1:
                raise ConfigError("grid_stride must be >= 1")
            for key in ("harnack_phi", "harnack_power_phi"):
                if cfg[key] is not None and cfg[key] not in TEST_FUNCTIONS:
                    raise ConfigError(f"{key} must be one of {sorted(TEST_FUNCTIONS)}")
            if cfg["harnack_q_prime"] is not None and not float(cfg["harnack_q_prime"]) > 1:
                raise ConfigError("harnack_q_prime must exceed 1")
            for key in ("n_paths", "harnack_paths", "dv_triples", "certificate_pairs"):
                if int(cfg[key]) < 1:
                    raise ConfigError(f"{key} must be >= 1")
            if int(cfg["bootstrap_resamples"]) < 0:
                raise ConfigError("bootstrap_resamples must be >= 0")
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None


# -- artifacts ---------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Writer:
    def __init__(self, out_dir: Path, label: str | None, config: dict):
        self.out_dir = Path(out_dir)
        self.fixed = label is not None
        self.label = label or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        self.config = config
        self.written: list[Path] = []

    def _path(self, name: str, ext: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / f"{name}-{self.label}.{ext}"

    def json(self, name: str, payload: dict, runtime: float | None = None) -> Path:
        doc = {"subcommand": name, "label": self.label, "config": self.config}
        doc.update(payload)
        if not self.fixed:
            doc["timestamp"] = datetime.now(timezone.utc).isoformat()
            if runtime is not None:
                doc["runtime_s"] = runtime
        path = self._path(name, "json")
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        self.written.append(path)
        return path

    def csv(self, name: str, rows: list[dict]) -> Path:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
        path = self._path(name, "csv")
        path.write_text(buf.getvalue())
        self.written.append(path)
        return path


# -- subcommands -------------------------------------------------------------


class Runner:
    def __init__(self, exp: Experiment, writer: Writer, workers: int):
        self.exp = exp
        self.w = writer
        self.workers = workers
        self._stats = None
        self._stats_time = 0.0
        self.failures: list[str] = []

    def _fail(self, what: str):
        self.failures.append(what)

    def stats(self):
        if self._stats is None:
            t0 = time.perf_counter()
            self._stats = simulate(self.exp.sim, self.exp.schedule, self.exp.grid_stride, workers=self.workers)
            self._stats_time = time.perf_counter() - t0
        return self._stats

    def constants(self):
        row = sched.constants_row(self.exp.schedule, self.exp.qs)
        rep = sched.bounds(self.exp.schedule, self.exp.qs)
        self.w.csv("constants", [row])
        self.w.json(
            "constants",
            {"schedule": self.exp.schedule.to_dict(), "certificate": self.exp.certificate.to_dict(), "bounds": rep.to_dict()},
        )

    def schedule_verify(self):
        t0 = time.perf_counter()
        res = sched.cross_check(self.exp.schedule)
        rows = [
            {
                "k": m["k"],
                "closed": m["closed"],
                "quad_rel_err": m["quad_rel_err"],
                "ab_bound": m["ab_bound"],
                "within_ab_bound": int(m["within_ab_bound"]),
            }
            for m in res["moments"]
        ]
        self.w.csv("schedule-verify", rows)
        self.w.json("schedule-verify", {"result": res}, time.perf_counter() - t0)
        if not res["pass"]:
            self._fail("schedule-verify: closed form disagrees with quadrature")

    def potential_check(self):
        t0 = time.perf_counter()
        rep = verify_certificate(
            self.exp.potential,
            self.exp.certificate,
            n_pairs=int(self.exp.raw["certificate_pairs"]),
            radius=self.exp.raw["certificate_radius"],
            seed=self.exp.sim.seed,
        )
        self.w.json("potential-check", {"report": rep.to_dict()}, time.perf_counter() - t0)
        if not rep.passed:
            self._fail("potential-check: certificate violated")

    def simulate(self):
        st = self.stats()
        sp = self.exp.schedule
        env = np.asarray(sched.envelope(sp, st.grid))
        rows = [
            {
                "t": float(t),
                "mean_abs_z": float(a),
                "se_abs_z": float(sa),
                "mean_sqrt_f_z": float(b),
                "se_sqrt_f_z": float(sb),
                "mean_f_z": float(c),
                "envelope": float(e),
            }
            for t, a, sa, b, sb, c, e in zip(
                st.grid, st.mean_abs_z, st.se_abs_z, st.mean_sqrt_f_z, st.se_sqrt_f_z, st.mean_f_z, env
            )
        ]
        self.w.csv("simulate", rows)
        kl = divergence_report(st, sp).kl_mc
        self.w.json(
            "simulate",
            {
                "seed": self.exp.sim.seed,
                "stats": st.summary(),
                "kl_mc": kl.value,
                "kl_mc_se": kl.se,
                "schedule": sp.to_dict(),
            },
            self._stats_time,
        )
        if st.failed:
            self._fail(f"simulate: {st.n_diverged} of {st.n_paths} paths diverged")

    def bounds(self):
        st = self.stats()
        sp = self.exp.schedule
        rep = divergence_report(st, sp)
        checks = {
            "kl_within_theorem": rep.kl_ok,
            "lemma_bound_respected": st.n_lemma_violations == 0,
            "run_ok": not st.failed,
        }
        self.w.csv(
            "bounds",
            [
                {
                    "T": sp.T,
                    "dist": sp.dist,
                    "kl_mc": rep.kl_mc.value,
                    "kl_mc_se": rep.kl_mc.se,
                    "kl_theorem": rep.kl_theorem,
                    "coupled_fraction_at_T": st.coupled_fraction_at_T,
                    "max_sup_z": st.max_sup_z,
                    "lemma_bound": st.lemma_bound,
                }
            ],
        )
        self.w.json("bounds", {"divergence": rep.to_dict(), "stats": st.summary(), "checks": checks})
        for name, ok in checks.items():
            if not ok:
                self._fail(f"bounds: {name}")

    def renyi(self):
        st = self.stats()
        rep = divergence_report(
            st,
            self.exp.schedule,
            self.exp.qs,
            n_boot=int(self.exp.raw["bootstrap_resamples"]),
            seed=self.exp.sim.seed,
        )
        self.w.csv("renyi", rep.renyi_rows())
        self.w.json("renyi", {"divergence": rep.to_dict()})
        for q, ok in rep.renyi_ok().items():
            if not ok:
                self._fail(f"renyi: estimate exceeds bound at q={q:g}")

    def harnack(self):
        raw = self.exp.raw
        sim = self.exp.sim
        t0 = time.perf_counter()
        n = int(raw["harnack_paths"])
        common = dict(T=sim.T, dt=sim.dt, n_paths=n, seed=sim.seed, workers=self.workers)
        ends_x = sample_endpoints(sim.potential, sim.x0, stream=1, **common)
        ends_xp = sample_endpoints(sim.potential, sim.x0_prime, stream=2, **common)
        log_rep = harnack_check(ends_x, ends_xp, self.exp.schedule, TEST_FUNCTIONS[raw["harnack_phi"]])
        power_rep = None
        if raw["harnack_power_phi"] is not None and raw["harnack_q_prime"] is not None:
            power_rep = harnack_check(
                ends_x,
                ends_xp,
                self.exp.schedule,
                TEST_FUNCTIONS[raw["harnack_power_phi"]],
                q_prime=float(raw["harnack_q_prime"]),
            )
        dv = dv_random_triples(int(raw["dv_triples"]), seed=sim.seed)
        self.w.json(
            "harnack",
            {
                "log_harnack": log_rep.to_dict(),
                "power_harnack": None if power_rep is None else power_rep.to_dict(),
                "dv_duality": dv,
            },
            time.perf_counter() - t0,
        )
        if not log_rep.log_pass:
            self._fail("harnack: log-Harnack violated")
        if power_rep is not None and power_rep.power_pass is False:
            self._fail("harnack: power-Harnack violated")
        if dv["min_slack"] < -1e-12:
            self._fail("harnack: negative Donsker-Varadhan slack")

    def all(self):
        self.potential_check()
        self.schedule_verify()
        self.constants()
        self.simulate()
        self.bounds()
        self.renyi()
        if self.exp.raw["harnack_check"]:
            self.harnack()
        self.w.json("all", {"artifacts": [p.name for p in self.w.written], "failures": list(self.failures)})


def dv_random_triples(n: int, seed: int = 0, max_support: int = 16) -> dict:
    """Donsker-Varadhan slack on random (p, r, phi) triples plus the equality case."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD5]))
    worst = math.inf
    worst_equality = 0.0
    for _ in range(n):
        k = int(rng.integers(1, max_support + 1))
        p = rng.dirichlet(np.ones(k))
        r = rng.dirichlet(np.ones(k))
        phi = rng.normal(0.0, 3.0, size=k)
        worst = min(worst, dv_duality_check(p, r, phi))
        shift = rng.normal()
        worst_equality = max(worst_equality, abs(dv_duality_check(p, r, np.log(p / r) + shift)))
    return {"n": n, "min_slack": worst, "max_equality_slack": worst_equality}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="revtransport", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--workers", type=int, default=None, help="default: $REVTRANSPORT_WORKERS or 1")
    ap.add_argument("--fixed-label", default=None, help="deterministic artifact label (no timestamps)")
    ap.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    label = args.fixed_label
    out_dir = Path(args.out) if args.out else Path(DEFAULTS["output_dir"])
    writer = Writer(out_dir, label, {})
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg["output_dir"] = str(args.out)
        writer = Writer(Path(cfg["output_dir"]), label, cfg)
        exp = Experiment(cfg)
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError("--workers must be >= 1")
        runner = Runner(exp, writer, workers)
        getattr(runner, args.subcommand.replace("-", "_"))()
        if runner.failures:
            raise CheckFailed("; ".join(runner.failures))
        return EXIT_OK
    except ConfigError as exc:
        return _error(writer, EXIT_INVALID, "validation_error", str(exc))
    except CheckFailed as exc:
        return _error(writer, EXIT_CHECK, "check_failed", str(exc))
    except Exception as exc:  # noqa: BLE001 - every failure must leave a report
        return _error(writer, EXIT_INTERNAL, "internal_error", f"{type(exc).__name__}: {exc}", traceback.format_exc())


def _error(writer: Writer, code: int, kind: str, message: str, tb: str | None = None) -> int:
    payload = {"status": kind, "exit_code": code, "message": message}
    if tb:
        payload["traceback"] = tb
    try:
        writer.json("error", payload)
    except OSError:
        pass
    print(f"revtransport: {kind}: {message}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())
