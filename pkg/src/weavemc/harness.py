"""Command-line front end: configuration, seeded runs and CSV/JSON output.

Subcommands::

    weavemc run         --config exp.cfg [--kernel wm,hwm --iters 100000 ...]
    weavemc tune        --config exp.cfg
    weavemc pretune     --config exp.cfg
    weavemc trace       --target student_t --dim 2 --h 0.2 --L 40 --seed 1
    weavemc limit-check --target student_t --hs 0.2,0.1,0.05 --horizon 1 --dt 1e-4

Exit status is 0 on success, 1 for configuration or data errors and 2 for
numerical failures.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .diagnostics import TIMING_COLUMNS, RunSummary, summaries_to_csv, summarize
from .dynamics import LevelSetState, ZeroGradientError, compare_limit, integrate_limit
from .kernels import KERNELS, Kernel, sample
from .targets import (GAUSSIAN, HAAR, LEBESGUE, SingularityError, TargetModel, gaussian_target,
                      load_dataset, logistic_target, sde_simulate, sde_target, student_t_target,
                      sv_simulate, sv_target, synthetic_logistic_data, wishart_scale)
from .transforms import NumericalError, PhasePoint, Preconditioner, weave
from .tuning import adaptive_pretune, tune_acceptance

WORKERS_ENV = "WEAVEMC_WORKERS"
MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class ConfigError(ValueError):
    """Invalid configuration, incompatible kernel/target pair or unreadable data."""


NUMERICAL_ERRORS = (NumericalError, SingularityError, ZeroGradientError, FloatingPointError,
                    OverflowError, np.linalg.LinAlgError)


def seed_split(master_seed: int, index: int) -> int:
    """Derive an independent 64-bit stream seed (splitmix64 finaliser of a counter)."""
    z = (int(master_seed) + (int(index) + 1) * GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


# ---------------------------------------------------------------------------
# Targets


@dataclass(frozen=True)
class TargetEntry:
    build: Callable[["ExperimentConfig"], TargetModel]
    references: tuple = (LEBESGUE, GAUSSIAN, HAAR)


def _gaussian(cfg):
    d = cfg.dim or 10
    cov = wishart_scale(d, d + 5, seed=0) / (d + 5)
    return gaussian_target(d, np.zeros(d), cov)


def _student_t(cfg):
    d = cfg.dim or 10
    scale = wishart_scale(d, d + 5, seed=0) / (d + 5)
    return student_t_target(d, cfg.nu, np.zeros(d), scale)


def _dataset_label(path, label):
    if label:
        return label
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    return header[-1]


def _logistic(cfg):
    if cfg.dataset:
        try:
            data = load_dataset(cfg.dataset, _dataset_label(cfg.dataset, cfg.label))
        except (OSError, ValueError, StopIteration) as exc:
            raise ConfigError(f"cannot load dataset {cfg.dataset!r}: {exc}") from exc
    else:
        p = (cfg.dim or 31) - 1
        data = synthetic_logistic_data(569, p, seed=0)
    return logistic_target(data)


def _sv(cfg):
    T = cfg.T or 100
    return sv_target(sv_simulate(T, 0.5, 10.0, seed=0))


def _sde(cfg):
    d = cfg.dim or 10
    N, horizon = 100, 5.0
    SigmaV = wishart_scale(d, d, seed=0)
    X = sde_simulate(d, N, horizon, np.ones(d), SigmaV, seed=0)
    return sde_target(X, horizon / N, SigmaV)


TARGETS: dict[str, TargetEntry] = {
    "gaussian": TargetEntry(_gaussian),
    "student_t": TargetEntry(_student_t),
    "logistic": TargetEntry(_logistic),
    "sv": TargetEntry(_sv),
    "sde": TargetEntry(_sde),
}


# ---------------------------------------------------------------------------
# Configuration


def _opt_float(s):
    return None if s in (None, "", "auto") else float(s)


@dataclass
class ExperimentConfig:
    target: str = "gaussian"
    kernel: str = "wm"  # comma-separated list or "all"
    dataset: str = ""
    label: str = ""
    dim: int = 0  # 0 means the target's default
    nu: float = 3.0
    T: int = 0
    h: str = "auto"
    s: str = "auto"
    L: int = 1
    jitter: float = 0.0
    iters: int = 100_000
    burnin: int = -1  # -1 means 10% of iters
    chains: int = 1
    seed: int = 0
    pretune_iters: int = 100_000
    auto_ar: str = ""  # overrides each kernel's default target rate
    out: str = ""

    @property
    def kernels(self) -> list:
        names = list(KERNELS) if self.kernel.strip() == "all" else [k.strip() for k in self.kernel.split(",")]
        return sorted(n for n in names if n)

    @property
    def burn_in(self) -> int:
        return self.iters // 10 if self.burnin < 0 else self.burnin

    def validate(self) -> "ExperimentConfig":
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}; choose from {sorted(TARGETS)}")
        if not self.kernels:
            raise ConfigError("no kernel given")
        for k in self.kernels:
            if k not in KERNELS:
                raise ConfigError(f"unknown kernel {k!r}; choose from {sorted(KERNELS)}")
            ref = KERNELS[k].reference
            if ref not in TARGETS[self.target].references:
                raise ConfigError(f"kernel {k!r} needs a {ref} reference, which target "
                                  f"{self.target!r} does not support")
        if not self.iters > self.burn_in >= 0:
            raise ConfigError(f"need iters > burnin >= 0, got iters={self.iters}, burnin={self.burn_in}")
        if self.iters - self.burn_in < 100:
            raise ConfigError("at least 100 post-burn-in iterations are needed for ESS")
        if self.chains < 1:
            raise ConfigError("chains must be at least 1")
        if self.L < 0 or self.jitter < 0 or self.jitter >= 1:
            raise ConfigError("need L >= 0 and 0 <= jitter < 1")
        if self.pretune_iters < 0:
            raise ConfigError("pretune_iters must be non-negative")
        for key in ("h", "s"):
            v = _opt_float(getattr(self, key))
            if v is not None and not v > 0:
                raise ConfigError(f"{key} must be positive or 'auto'")
        if self.auto_ar and not 0 < float(self.auto_ar) < 1:
            raise ConfigError("auto_ar must lie in (0, 1)")
        if self.nu <= 0 or self.dim < 0:
            raise ConfigError("need nu > 0 and dim >= 0")
        return self

    def param_for(self, kernel: str) -> Optional[float]:
        return _opt_float(self.s if KERNELS[kernel].param == "s" else self.h)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    text = str(value).strip()
    try:
        if kind == "int":
            num = float(text)
            if num != int(num):
                raise ValueError(text)
            return int(num)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[config]\n" + text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return dict(parser["config"])


def make_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if v is not None:
                merged[k] = _coerce(k, v)
    return ExperimentConfig(**merged).validate()


# ---------------------------------------------------------------------------
# Experiments


def prepare(cfg: ExperimentConfig, model: TargetModel):
    """Preconditioner and starting point shared by every kernel."""
    rng = np.random.default_rng(seed_split(cfg.seed, 0))
    if cfg.pretune_iters > 0:
        res = adaptive_pretune(model, cfg.pretune_iters, rng)
        return res.pre, res.draws[-1].copy()
    pre = Preconditioner.identity(model.dim)
    return pre, pre.draw(rng)


def _kernel_seed(cfg: ExperimentConfig, name: str) -> int:
    return seed_split(cfg.seed, 1 + list(KERNELS).index(name))


def resolve_param(cfg: ExperimentConfig, name: str, model, pre, x0):
    """Configured step parameter, or the result of acceptance tuning when 'auto'."""
    fixed = cfg.param_for(name)
    if fixed is not None:
        return fixed, None
    kernel = Kernel(name, model, pre, 1.0, L=max(cfg.L, 1), jitter=cfg.jitter)
    rng = np.random.default_rng(seed_split(_kernel_seed(cfg, name), 0))
    target = float(cfg.auto_ar) if cfg.auto_ar else None
    res = tune_acceptance(kernel, target, rng=rng, x0=x0)
    return res.param, res


@dataclass
class ChainJob:
    config: dict
    kernel: str
    param: float
    M: list
    Sigma: list
    x0: list
    seed: int
    method: str


def _run_chain(job: ChainJob) -> RunSummary:
    cfg = ExperimentConfig(**job.config)
    model = TARGETS[cfg.target].build(cfg)
    pre = Preconditioner.from_moments(np.array(job.M), np.array(job.Sigma))
    kernel = Kernel(job.kernel, model, pre, job.param, L=cfg.L, jitter=cfg.jitter)
    rng = np.random.default_rng(job.seed)
    record = sample(kernel, np.array(job.x0), cfg.iters, rng)
    return summarize(record.tail(cfg.burn_in), job.method)


def worker_cap() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be at least 1")
        return n
    return os.cpu_count() or 1


@dataclass
class ExperimentReport:
    summaries: list
    params: dict
    seeds: dict
    config: dict
    version: str = __version__
    tuning: dict = field(default_factory=dict)

    def csv(self, include_timing: bool = True) -> str:
        return summaries_to_csv(self.summaries, include_timing)

    def to_json(self) -> str:
        """Deterministic fields first; wall-clock columns live under ``timing``."""
        rows = [{k: v for k, v in asdict(s).items() if k not in TIMING_COLUMNS} for s in self.summaries]
        timing = [{"method": s.method, **{k: getattr(s, k) for k in TIMING_COLUMNS}} for s in self.summaries]
        payload = {"version": self.version, "config": self.config, "seeds": self.seeds,
                   "params": self.params, "tuning": self.tuning, "summaries": rows, "timing": timing}
        return json.dumps(payload, indent=2, sort_keys=True)


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentReport:
    cfg.validate()
    model = TARGETS[cfg.target].build(cfg)
    pre, x0 = prepare(cfg, model)
    jobs, params, seeds, tuning = [], {}, {}, {}
    for name in cfg.kernels:
        param, res = resolve_param(cfg, name, model, pre, x0)
        params[name] = param
        if res is not None:
            tuning[name] = {"rate": res.rate, "converged": res.converged, "probes": len(res.history)}
        base = _kernel_seed(cfg, name)
        for c in range(cfg.chains):
            method = name if cfg.chains == 1 else f"{name}[{c}]"
            seed = seed_split(base, c + 1)
            seeds[method] = seed
            jobs.append(ChainJob(asdict(cfg), name, param, pre.M.tolist(), pre.Sigma.tolist(),
                                 x0.tolist(), seed, method))
    workers = worker_cap() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        summaries = [_run_chain(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            summaries = list(pool.map(_run_chain, jobs))
    summaries.sort(key=lambda s: (s.method.split("[")[0], _chain_index(s.method)))
    return ExperimentReport(summaries, params, {k: str(v) for k, v in seeds.items()}, asdict(cfg),
                            tuning=tuning)


def _chain_index(method: str) -> int:
    return int(method.split("[")[1].rstrip("]")) if "[" in method else 0


def write_report(report: ExperimentReport, out: str, stream=None) -> None:
    """Write ``<out>.csv`` and ``<out>.json``, or the CSV to ``stream`` when ``out`` is empty."""
    if not out:
        (stream or sys.stdout).write(report.csv())
        return
    base = Path(out)
    base.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{base}.csv").write_text(report.csv(), encoding="utf-8")
    Path(f"{base}.json").write_text(report.to_json() + "\n", encoding="utf-8")


def run_trace(model: TargetModel, h: float, L: int, seed: int) -> str:
    """CSV of the weave path (unpreconditioned, xi = grad U) from a standard normal phase point."""
    if not h > 0 or L < 1:
        raise ConfigError("trace needs h > 0 and L >= 1")
    rng = np.random.default_rng(seed)
    d = model.dim
    z = PhasePoint(rng.standard_normal(d), rng.standard_normal(d))
    path = [z]
    weave(z, h, L, model.grad_potential, trace=path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)])
    for k, p in enumerate(path):
        w.writerow([k] + [repr(float(a)) for a in p.x] + [repr(float(a)) for a in p.v])
    return buf.getvalue()


def run_limit_check(model: TargetModel, hs, T: float, dt: float, seed: int = 0) -> str:
    """CSV of h, e_T, drift_max, tangency_max, order_estimate over the step-size grid."""
    hs = [float(h) for h in hs]
    if not hs:
        raise ConfigError("limit-check needs at least one step size")
    if any(not h > 0 for h in hs):
        raise ConfigError("step sizes must be positive")
    rng = np.random.default_rng(seed)
    d = model.dim
    z0 = PhasePoint(rng.standard_normal(d), rng.standard_normal(d))
    report = integrate_limit(model, LevelSetState.from_phase(model, z0), T, dt)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "e_T", "drift_max", "tangency_max", "order_estimate"])
    prev = None
    for h in hs:
        e = compare_limit(model, z0, h, T, dt, report)
        order = "" if prev is None else repr(math.log2(prev[1] / e) / math.log2(prev[0] / h))
        w.writerow([repr(h), repr(e), repr(report.u_drift), repr(report.tangency), order])
        prev = (h, e)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# CLI

_FLAG_KEYS = ("target", "kernel", "dataset", "label", "dim", "nu", "T", "h", "s", "L", "jitter",
              "iters", "burnin", "chains", "seed", "pretune_iters", "auto_ar", "out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weavemc", description="Weave-Metropolis sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file; flags override it")
        for key in _FLAG_KEYS:
            p.add_argument(f"--{key}", dest=key, default=None)

    for name, text in [("run", "run chains and write summary CSV/JSON"),
                       ("tune", "tune step parameters to target acceptance rates"),
                       ("pretune", "estimate M and Sigma with adaptive Metropolis"),
                       ("trace", "emit a weave path as CSV")]:
        common(sub.add_parser(name, help=text))
    lc = sub.add_parser("limit-check", help="compare weave iterates with the limit ODE")
    common(lc)
    lc.add_argument("--hs", default="0.2,0.1,0.05", help="comma-separated step sizes")
    lc.add_argument("--dt", type=float, default=1e-4)
    lc.add_argument("--horizon", type=float, default=1.0, help="end time of the comparison")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS}
    return make_config(file_values, overrides)


def _emit(text: str, out: str, suffix: str) -> None:
    if out:
        path = Path(out + suffix)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            write_report(run_experiment(cfg), cfg.out)
        elif args.command == "pretune":
            model = TARGETS[cfg.target].build(cfg)
            pre, _ = prepare(cfg, model)
            _emit(json.dumps({"M": pre.M.tolist(), "Sigma": pre.Sigma.tolist()}, indent=2) + "\n",
                  cfg.out, ".json")
        elif args.command == "tune":
            model = TARGETS[cfg.target].build(cfg)
            pre, x0 = prepare(cfg, model)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["kernel", "param", "rate", "converged"])
            for name in cfg.kernels:
                kernel = Kernel(name, model, pre, 1.0, L=max(cfg.L, 1), jitter=cfg.jitter)
                rng = np.random.default_rng(seed_split(_kernel_seed(cfg, name), 0))
                target = float(cfg.auto_ar) if cfg.auto_ar else None
                res = tune_acceptance(kernel, target, rng=rng, x0=x0)
                w.writerow([name, repr(res.param), repr(res.rate), res.converged])
            _emit(buf.getvalue(), cfg.out, ".csv")
        elif args.command == "trace":
            model = TARGETS[cfg.target].build(cfg)
            h = cfg.param_for("wm")
            _emit(run_trace(model, 0.1 if h is None else h, max(cfg.L, 1), cfg.seed), cfg.out, ".csv")
        elif args.command == "limit-check":
            model = TARGETS[cfg.target].build(cfg)
            hs = [s for s in args.hs.split(",") if s.strip()]
            _emit(run_limit_check(model, hs, args.horizon, args.dt, cfg.seed), cfg.out, ".csv")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
