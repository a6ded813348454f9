"""Benchmark harness: synthetic data, method runs, CSV rows and a JSON summary.

Usage::

    bench run --config experiment.toml
    bench validate --config experiment.toml
    bench oracle --model linear --p 4
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adjoint import gradient_asm, gradient_smoothed, hessian_fa, hessian_sa
from .fd_baselines import FdConfig, gradient_fd, hessian_fd
from .forward_sens import gradient_se, hessian_se
from .integrator import IntegrationError, SolverConfig
from .likelihood import HIV_POST, GaussianMetric, ObservationSet, PostProcessor, evaluate_misfit
from .models import (
    HIV_THETA0,
    exact_gradient_linear,
    exact_hessian_linear,
    exact_solution_linear,
    make_hiv,
    make_linear_diagonal,
)
from .quadrature import QuadratureError
from .reports import max_rel_error

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ResultRow",
    "CSV_HEADER",
    "load_config",
    "observation_times",
    "sample_linear_params",
    "sample_hiv_params",
    "perturb_data",
    "sample_rng",
    "make_instance",
    "run_experiment",
    "rows_to_csv",
    "summarize",
    "write_outputs",
    "main",
]

CSV_HEADER = ("model", "method", "target", "p", "n_obs", "sample", "seconds",
              "rhs_evals", "ref", "rel_err", "status")

LINEAR_RANGE = (-1.1, -0.1)
HIV_SPREAD = 0.05
HIV_EFFICACY_CAP = 0.999
_HIV_EFFICACIES = (9, 10)
_MODEL_CODES = {"linear": 0, "hiv": 1}
_SMOOTHED = re.compile(r"^smoothed\(\s*([^()\s]+)\s*\)$")

# method -> targets it implements
_IMPLEMENTS = {
    "fd": ("gradient", "hessian"),
    "se": ("gradient", "hessian"),
    "asm": ("gradient",),
    "sa": ("hessian",),
    "fa": ("hessian",),
    "smoothed": ("gradient",),
}
# failures that are recorded per sample instead of aborting the run
_RECOVERABLE = (IntegrationError, QuadratureError, FloatingPointError, np.linalg.LinAlgError,
                OverflowError)


class ConfigError(ValueError):
    pass


def parse_method(name: str):
    """Return ``(kind, sigma)``; ``sigma`` is only set for ``smoothed(σ)``."""
    m = _SMOOTHED.match(name)
    if m:
        try:
            sigma = float(m.group(1))
        except ValueError:
            raise ConfigError(f"bad smoothing width in {name!r}") from None
        if not (math.isfinite(sigma) and sigma > 0):
            raise ConfigError(f"smoothing width must be positive in {name!r}")
        return "smoothed", sigma
    if name in _IMPLEMENTS and name != "smoothed":
        return name, None
    raise ConfigError(f"unknown method {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "linear"
    p: Optional[tuple] = None  # linear: required schedule; HIV: always (11,)
    n_obs: tuple = (11,)
    horizon: float = 100.0
    samples: int = 100
    seed: int = 0
    methods: tuple = ("se", "asm")
    targets: tuple = ("gradient",)
    rtol: float = 1e-10
    atol: float = 1e-14
    hiv_u0: Optional[tuple] = None
    hiv_theta0: Optional[tuple] = None
    fd_scheme: str = "forward"
    fd_c: Optional[float] = None
    output: str = "results.csv"
    record_timing: bool = True

    def __post_init__(self):
        if self.model not in _MODEL_CODES:
            raise ConfigError("model must be 'linear' or 'hiv'")
        if self.p is None:
            if self.model == "linear":
                raise ConfigError("the linear model needs a p schedule")
            object.__setattr__(self, "p", (11,))
        for name in ("p", "n_obs", "methods", "targets"):
            val = getattr(self, name)
            if isinstance(val, (str, int)) or not len(val):
                raise ConfigError(f"{name} must be a nonempty list")
            object.__setattr__(self, name, tuple(val))
        if self.model == "hiv" and self.p != (11,):
            raise ConfigError("the HIV model has p = 11; omit the p schedule")
        if any(not isinstance(k, int) or k < 1 for k in self.p):
            raise ConfigError("p values must be positive integers")
        if any(not isinstance(k, int) or k < 1 for k in self.n_obs):
            raise ConfigError("n_obs values must be positive integers")
        if not (isinstance(self.samples, int) and self.samples >= 1):
            raise ConfigError("samples must be an integer >= 1")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigError("seed must be a nonnegative integer")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError("horizon must be positive")
        for t in self.targets:
            if t not in ("gradient", "hessian"):
                raise ConfigError(f"unknown target {t!r}")
        for mth in self.methods:
            kind, _ = parse_method(mth)
            if not set(_IMPLEMENTS[kind]) & set(self.targets):
                raise ConfigError(f"method {mth!r} implements none of the requested targets")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate method")
        try:
            SolverConfig(rtol=self.rtol, atol=self.atol)
            FdConfig(self.fd_scheme, self.fd_c)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name, size in (("hiv_u0", 5), ("hiv_theta0", 11)):
            val = getattr(self, name)
            if val is not None:
                if self.model != "hiv":
                    raise ConfigError(f"{name} only applies to the HIV model")
                if len(val) != size:
                    raise ConfigError(f"{name} must have {size} entries")
                object.__setattr__(self, name, tuple(float(x) for x in val))
        if self.model == "hiv" and self.hiv_u0 is None:
            raise ConfigError("HIV runs need an initial state ([hiv] u0)")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)

    @property
    def fd(self) -> FdConfig:
        return FdConfig(self.fd_scheme, self.fd_c)

    @property
    def summary_path(self) -> Path:
        return Path(self.output).with_suffix(".json")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kw = {}
        sections = {"solver": ("rtol", "atol"), "hiv": ("u0", "theta0"), "fd": ("scheme", "c")}
        for sec, keys in sections.items():
            body = data.pop(sec, {})
            if not isinstance(body, dict):
                raise ConfigError(f"[{sec}] must be a table")
            unknown = set(body) - set(keys)
            if unknown:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")
            for k, v in body.items():
                kw[k if sec == "solver" else f"{sec}_{k}"] = v
        top = {f.name for f in cls.__dataclass_fields__.values()} - {
            "rtol", "atol", "hiv_u0", "hiv_theta0", "fd_scheme", "fd_c"}
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        kw.update(data)
        for k in ("horizon", "rtol", "atol", "fd_c"):
            if isinstance(kw.get(k), int) and not isinstance(kw.get(k), bool):
                kw[k] = float(kw[k])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


@dataclass
class ResultRow:
    model: str
    method: str
    target: str
    p: int
    n_obs: int
    sample: int
    seconds: float
    rhs_evals: Optional[int]
    ref: str
    rel_err: float
    status: str = "ok"

    def cells(self, record_timing: bool = True):
        sec = self.seconds if record_timing else float("nan")
        return [self.model, self.method, self.target, str(self.p), str(self.n_obs),
                str(self.sample), _fmt(sec), "" if self.rhs_evals is None else str(self.rhs_evals),
                self.ref, _fmt(self.rel_err), self.status]


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# sampling


def sample_rng(seed: int, model: str, p: int, n_obs: int, sample: int) -> np.random.Generator:
    """Independent Philox stream per (model, p, n_obs, sample)."""
    ss = np.random.SeedSequence(seed, spawn_key=(_MODEL_CODES[model], p, n_obs, sample))
    return np.random.Generator(np.random.Philox(ss))


def observation_times(n_obs: int, horizon: float) -> np.ndarray:
    """``t_i = i T / (n_obs + 1)``: regular, both endpoints excluded."""
    return np.arange(1, n_obs + 1) * (horizon / (n_obs + 1))


def sample_linear_params(p: int, rng: np.random.Generator) -> np.ndarray:
    if p < 1:
        raise ValueError("p must be >= 1")
    return rng.uniform(*LINEAR_RANGE, size=p)


def sample_hiv_params(rng: np.random.Generator, theta0=HIV_THETA0) -> np.ndarray:
    """±5 % uniform draws around ``theta0``; efficacies are capped below 1."""
    theta0 = np.asarray(theta0, dtype=float)
    th = theta0 * rng.uniform(1.0 - HIV_SPREAD, 1.0 + HIV_SPREAD, size=theta0.size)
    return clamp_hiv_efficacies(th)


def clamp_hiv_efficacies(theta) -> np.ndarray:
    th = np.array(theta, dtype=float)
    for k in _HIV_EFFICACIES:
        th[k] = min(th[k], HIV_EFFICACY_CAP)
    return th


def perturb_data(y_clean, rng: np.random.Generator) -> np.ndarray:
    """Add ``U[0, 0.1 max(y)]`` noise entrywise (global max over all entries)."""
    y = np.asarray(y_clean, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("clean data must be finite")
    width = 0.1 * float(np.max(y)) if y.size else 0.0
    if width <= 0:
        return y.copy()
    return y + rng.uniform(0.0, width, size=y.shape)


@dataclass
class Instance:
    model: object
    obs: ObservationSet
    metric: GaussianMetric
    post: PostProcessor
    theta: np.ndarray


def make_instance(cfg: ExperimentConfig, p: int, n_obs: int, sample: int) -> Instance:
    """Seeded parameter draw plus perturbed synthetic data."""
    rng = sample_rng(cfg.seed, cfg.model, p, n_obs, sample)
    times = observation_times(n_obs, cfg.horizon)
    if cfg.model == "linear":
        theta = sample_linear_params(p, rng)
        model = make_linear_diagonal(theta, cfg.horizon)
        post = PostProcessor.identity(p)
        clean = exact_solution_linear(theta, times)
    else:
        theta0 = np.asarray(cfg.hiv_theta0 if cfg.hiv_theta0 is not None else HIV_THETA0)
        theta = sample_hiv_params(rng, theta0)
        model = make_hiv(theta, cfg.hiv_u0, cfg.horizon)
        post = HIV_POST
        metric = GaussianMetric.identity(post.obs_dim)
        dummy = ObservationSet(times, np.zeros((n_obs, post.obs_dim)))
        states = evaluate_misfit(model, dummy, metric, post, theta, cfg.solver).stop_states
        clean = post(states)
    y = perturb_data(clean, rng)
    return Instance(model, ObservationSet(times, y), GaussianMetric.identity(post.obs_dim),
                    post, theta)


# ---------------------------------------------------------------------------
# running


def _run_method(kind, sigma, target, inst: Instance, cfg: ExperimentConfig):
    args = (inst.model, inst.obs, inst.metric, inst.post, inst.theta)
    sc = cfg.solver
    if target == "gradient":
        if kind == "fd":
            return gradient_fd(*args, cfg.fd, sc)
        if kind == "se":
            return gradient_se(*args, sc)
        if kind == "asm":
            return gradient_asm(*args, sc)
        if kind == "smoothed":
            return gradient_smoothed(*args, sigma, sc)
    else:
        if kind == "fd":
            return hessian_fd(*args, cfg.fd, sc)
        if kind == "se":
            return hessian_se(*args, sc)
        if kind == "sa":
            return hessian_sa(*args, sc)
        if kind == "fa":
            return hessian_fa(*args, cfg=sc)
    raise ValueError(f"{kind} does not implement {target}")


_REF_METHOD = {"gradient": "se", "hessian": "sa"}


def _reference(target, inst: Instance, cfg: ExperimentConfig, cache: dict):
    """Return ``(tag, value, report_or_None)``."""
    if cfg.model == "linear":
        fn = exact_gradient_linear if target == "gradient" else exact_hessian_linear
        return "exact", fn(inst.theta, inst.obs), None
    tag = _REF_METHOD[target]
    if (tag, target) not in cache:
        cache[(tag, target)] = _run_method(tag, None, target, inst, cfg)
    rep = cache[(tag, target)]
    return tag, rep.value, rep


def _error_tag(exc: BaseException) -> str:
    return f"error:{type(exc).__name__}"


def run_experiment(cfg: ExperimentConfig, progress=None) -> list:
    """Run every (p, n_obs, sample, method, target) combination.

    Rows come out sorted by cell and then sample index.
    """
    rows = []
    for p in cfg.p:
        for n_obs in cfg.n_obs:
            per_cell = {}
            for sample in range(cfg.samples):
                inst = make_instance(cfg, p, n_obs, sample)
                cache: dict = {}
                for target in cfg.targets:
                    ref_tag = "exact" if cfg.model == "linear" else _REF_METHOD[target]
                    ref_val = ref_err = None
                    try:
                        ref_tag, ref_val, _ = _reference(target, inst, cfg, cache)
                    except _RECOVERABLE as exc:
                        ref_err = exc
                    for mth in cfg.methods:
                        kind, sigma = parse_method(mth)
                        if target not in _IMPLEMENTS[kind]:
                            continue
                        row = _one_row(cfg, inst, p, n_obs, sample, mth, kind, sigma, target,
                                       ref_tag, ref_val, ref_err, cache)
                        per_cell.setdefault((mth, target), []).append(row)
                if progress is not None:
                    progress(p, n_obs, sample)
            for mth in cfg.methods:
                for target in cfg.targets:
                    rows.extend(per_cell.get((mth, target), []))
    return rows


def _one_row(cfg, inst, p, n_obs, sample, mth, kind, sigma, target, ref_tag, ref_val, ref_err, cache):
    base = dict(model=cfg.model, method=mth, target=target, p=p, n_obs=n_obs, sample=sample,
                ref=ref_tag)
    try:
        if (kind, target) in cache:
            rep = cache[(kind, target)]
        else:
            rep = _run_method(kind, sigma, target, inst, cfg)
            cache[(kind, target)] = rep
    except _RECOVERABLE as exc:
        return ResultRow(**base, seconds=float("nan"), rhs_evals=None, rel_err=float("nan"),
                         status=_error_tag(exc))
    if ref_err is not None:
        return ResultRow(**base, seconds=rep.seconds, rhs_evals=int(rep.rhs_evals),
                         rel_err=float("nan"), status="ref_" + _error_tag(ref_err))
    return ResultRow(**base, seconds=rep.seconds, rhs_evals=int(rep.rhs_evals),
                     rel_err=max_rel_error(rep.value, ref_val))


def rows_to_csv(rows, record_timing: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.cells(record_timing))
    return buf.getvalue()


def _quantiles(values):
    x = np.asarray([v for v in values if math.isfinite(v)], dtype=float)
    if x.size == 0:
        return None
    q = np.quantile(x, [0.5, 0.025, 0.975], method="inverted_cdf")
    return {"median": float(q[0]), "q025": float(q[1]), "q975": float(q[2])}


def summarize(rows, record_timing: bool = True) -> list:
    """Per-cell median and 2.5 %/97.5 % order statistics over successful rows."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.model, r.method, r.target, r.p, r.n_obs), []).append(r)
    out = []
    for (model, method, target, p, n_obs), rs in cells.items():
        ok = [r for r in rs if r.status == "ok"]
        out.append({
            "model": model, "method": method, "target": target, "p": p, "n_obs": n_obs,
            "ref": rs[0].ref, "samples": len(rs), "ok": len(ok),
            "seconds": _quantiles([r.seconds for r in ok]) if record_timing else None,
            "rhs_evals": _quantiles([float(r.rhs_evals) for r in ok]),
            "rel_err": _quantiles([r.rel_err for r in ok]),
        })
    return out


def write_outputs(cfg: ExperimentConfig, rows) -> tuple:
    csv_path = Path(cfg.output)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows, cfg.record_timing))
    summary = {"config": _config_json(cfg), "cells": summarize(rows, cfg.record_timing)}
    with open(cfg.summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, cfg.summary_path


def _config_json(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# CLI


@click.group()
def main():
    """Gradient/Hessian benchmark harness."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--quiet", is_flag=True, help="No per-sample progress on stderr.")
def run(config_path, quiet):
    """Execute an experiment and write CSV + JSON summary."""
    cfg = _load_or_exit(config_path)

    def progress(p, n_obs, sample):
        click.echo(f"p={p} n_obs={n_obs} sample={sample + 1}/{cfg.samples}", err=True)

    start = time.perf_counter()
    rows = run_experiment(cfg, None if quiet else progress)
    csv_path, json_path = write_outputs(cfg, rows)
    bad = sum(r.status != "ok" for r in rows)
    click.echo(f"{len(rows)} rows ({bad} failed) in {time.perf_counter() - start:.1f} s")
    click.echo(f"wrote {csv_path} and {json_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def validate(config_path):
    """Check a config file against the schema."""
    cfg = _load_or_exit(config_path)
    click.echo(f"ok: model={cfg.model} p={list(cfg.p)} n_obs={list(cfg.n_obs)} "
               f"samples={cfg.samples} methods={list(cfg.methods)} targets={list(cfg.targets)}")


@main.command()
@click.option("--model", type=click.Choice(["linear"]), default="linear", show_default=True)
@click.option("--p", "p", type=click.IntRange(min=1), required=True)
@click.option("--n-obs", type=click.IntRange(min=1), default=11, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--sample", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--horizon", type=float, default=100.0, show_default=True)
def oracle(model, p, n_obs, seed, sample, horizon):
    """Print the exact misfit gradient and Hessian for a seeded instance."""
    cfg = ExperimentConfig(model=model, p=(p,), n_obs=(n_obs,), horizon=horizon, seed=seed,
                           samples=sample + 1)
    inst = make_instance(cfg, p, n_obs, sample)
    out = {
        "model": model, "p": p, "n_obs": n_obs, "seed": seed, "sample": sample,
        "theta": inst.theta.tolist(),
        "times": inst.obs.times.tolist(),
        "gradient": exact_gradient_linear(inst.theta, inst.obs).tolist(),
        "hessian": exact_hessian_linear(inst.theta, inst.obs).tolist(),
    }
    click.echo(json.dumps(out, indent=2))


def _load_or_exit(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        click.echo(f"invalid config: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
