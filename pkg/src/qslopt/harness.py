"""Experiment runner: configuration, the four experiment recipes and their outputs.

Every experiment reads one YAML document, validates it completely before any
computation, runs independent optimizations on a process pool and writes

* CSV files: a ``#`` comment line with units, a header row, 17 significant digits;
* JSON summaries;
* ``manifest.json``: effective config, versions, stage timings and a sha256 of
  every output file.

Units: hbar = 1; Landau-Zener times in 1/omega, chain times in 1/J.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import yaml

from . import __version__
from .core import TimeGrid
from .krotov import KrotovConfig, KrotovError, optimize
from .models import ControlledModel, LZModel, SpinChainModel
from .qsl import (
    EnergySpreadProfile,
    ScanFailedError,
    ThresholdScanConfig,
    UnbracketedError,
    asymptotic_curvature,
    bhattacharyya_static_tqsl,
    detect_tqsl_curvature,
    loglog_second_derivative,
    make_grid,
    mean_energy_spread,
    per_site_bound,
    threshold_time_scan,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunResult",
    "KINDS",
    "load_config",
    "parse_config",
    "dump_config",
    "apply_overrides",
    "run_experiment",
    "run_lz_convergence",
    "run_lz_qsl_compare",
    "run_chain_threshold_scan",
    "run_chain_bound_compare",
    "profile_shape_metrics",
    "linear_fit",
    "file_sha256",
]

KINDS = ("lz-convergence", "lz-qsl-compare", "chain-threshold-scan", "chain-bound-compare")
LZ_UNITS = "# units: hbar = 1, energies in omega, times in 1/omega"
CHAIN_UNITS = "# units: hbar = 1, energies in J, times in 1/J"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LZSpec:
    omega: float = 1.0
    gamma0: float = -500.0


@dataclass(frozen=True)
class ChainSpec:
    coupling: float = 1.0
    trap_strength: float = 2.0


@dataclass(frozen=True)
class GridSpec:
    """Step rule: explicit ``steps``, else dt <= max_dt and ||H|| dt <= norm_dt."""

    norm_dt: float | None = 0.1
    max_dt: float | None = None
    steps: int | None = None
    min_steps: int = 100


@dataclass(frozen=True)
class OptimizerSpec:
    lambdas: tuple[float, ...] | None = None
    shape: str = "sin2"
    max_iterations: int = 1000
    target_infidelity: float = 1e-4
    stall_window: int = 500
    stall_threshold: float = 1e-6
    max_doublings: int = 30
    bounds: dict[str, tuple[float, float]] | None = None


@dataclass(frozen=True)
class CurvatureSpec:
    ratio: float = 1.05
    window: int = 9
    zero_band: float = 0.05


@dataclass(frozen=True)
class ScanSpec:
    """T-grid per chain length: ``t_grid`` if given, else per_site_time * (N - 1) + offsets."""

    infidelity_target: float = 5e-5
    iteration_budget: int = 100_000
    bisection_depth: int = 4
    t_grid: tuple[float, ...] | None = None
    per_site_time: float = 0.5
    offsets: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 8.0)
    probe_all: bool = False
    fit_min_length: int = 9


@dataclass(frozen=True)
class BoundSpec:
    profile_lengths: tuple[int, ...] | None = None


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "results"
    dat_aliases: bool = False


# top-level sections allowed per experiment kind
SECTIONS: dict[str, dict[str, type]] = {
    "lz-convergence": {"model": LZSpec, "grid": GridSpec, "optimizer": OptimizerSpec,
                       "curvature": CurvatureSpec, "output": OutputSpec},
    "lz-qsl-compare": {"model": LZSpec, "grid": GridSpec, "optimizer": OptimizerSpec,
                       "curvature": CurvatureSpec, "output": OutputSpec},
    "chain-threshold-scan": {"model": ChainSpec, "grid": GridSpec, "optimizer": OptimizerSpec,
                             "scan": ScanSpec, "output": OutputSpec},
    "chain-bound-compare": {"model": ChainSpec, "grid": GridSpec, "optimizer": OptimizerSpec,
                            "scan": ScanSpec, "bounds": BoundSpec, "output": OutputSpec},
}
# top-level lists per kind: key -> (element type, required)
LISTS: dict[str, dict[str, tuple[type, bool]]] = {
    "lz-convergence": {"times": (float, True)},
    "lz-qsl-compare": {"gamma0_over_omega": (float, True), "t_factors": (float, False)},
    "chain-threshold-scan": {"lengths": (int, True)},
    "chain-bound-compare": {"lengths": (int, True)},
}
DEFAULT_T_FACTORS = (0.8, 0.9, 1.0, 1.05, 1.1, 1.2)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: Any
    grid: GridSpec = GridSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    output: OutputSpec = OutputSpec()
    curvature: CurvatureSpec | None = None
    scan: ScanSpec | None = None
    bounds: BoundSpec | None = None
    times: tuple[float, ...] | None = None
    gamma0_over_omega: tuple[float, ...] | None = None
    t_factors: tuple[float, ...] | None = None
    lengths: tuple[int, ...] | None = None

    def krotov(self, **overrides: Any) -> KrotovConfig:
        o = self.optimizer
        kw = dict(
            lambdas=o.lambdas, shape=o.shape, max_iterations=o.max_iterations,
            target_infidelity=o.target_infidelity, stall_window=o.stall_window,
            stall_threshold=o.stall_threshold, max_doublings=o.max_doublings, bounds=o.bounds,
        )
        kw.update(overrides)
        return KrotovConfig(**kw)

    def grid_for(self, model: ControlledModel, T: float) -> TimeGrid:
        g = self.grid
        return make_grid(model, T, norm_dt=g.norm_dt, max_dt=g.max_dt, steps=g.steps, min_steps=g.min_steps)

    def chain_model(self, N: int) -> SpinChainModel:
        return SpinChainModel(int(N), self.model.coupling, self.model.trap_strength)

    def t_grid_for(self, N: int) -> tuple[float, ...]:
        s = self.scan
        if s.t_grid is not None:
            return s.t_grid
        return tuple(round(s.per_site_time * (N - 1) + o, 12) for o in s.offsets)


def _coerce(value: Any, hint: Any, where: str) -> Any:
    """Convert a YAML scalar/list to the annotated type, or raise ConfigError."""
    text = str(hint)
    optional = "None" in text
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: value required")
    if "dict[" in text:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping of name -> [lo, hi]")
        out = {}
        for k, v in value.items():
            if not (isinstance(v, (list, tuple)) and len(v) == 2):
                raise ConfigError(f"{where}.{k}: expected [lo, hi]")
            lo, hi = (_number(x, float, f"{where}.{k}", allow_inf=True) for x in v)
            if not lo < hi:
                raise ConfigError(f"{where}.{k}: lower bound must be below upper bound")
            out[str(k)] = (lo, hi)
        return out
    if "tuple[" in text:
        elem = int if "tuple[int" in text else float
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_number(v, elem, where) for v in value)
    if "bool" in text:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if "int" in text:
        return _number(value, int, where)
    if "float" in text:
        return _number(value, float, where)
    if "str" in text:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def _number(value: Any, kind: type, where: str, allow_inf: bool = False) -> int | float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    v = float(value)
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise ConfigError(f"{where}: value must be finite")
    return v


def _section(cls: type, raw: Any, where: str) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(hints))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**{k: _coerce(v, hints[k], f"{where}.{k}") for k, v in raw.items()})


def parse_config(raw: Any, kind: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping into an ExperimentConfig (unknown keys are errors)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    exp = raw.pop("experiment", kind)
    if exp not in KINDS:
        raise ConfigError(f"experiment must be one of {KINDS}, got {exp!r}")
    if kind is not None and exp != kind:
        raise ConfigError(f"config describes {exp!r}, command expects {kind!r}")
    sections, lists = SECTIONS[exp], LISTS[exp]
    unknown = sorted(set(raw) - set(sections) - set(lists))
    if unknown:
        raise ConfigError(f"unknown keys for {exp}: {unknown}")
    kw: dict[str, Any] = {"experiment": exp}
    for name, cls in sections.items():
        kw[name] = _section(cls, raw.get(name), name)
    for name, (elem, required) in lists.items():
        if name not in raw:
            if required:
                raise ConfigError(f"{name}: required for {exp}")
            continue
        values = raw[name]
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"{name}: expected a non-empty list")
        kw[name] = tuple(_number(v, elem, name) for v in values)
    cfg = ExperimentConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    """Semantic checks; builds every object a run will need so errors surface early."""
    try:
        if cfg.experiment.startswith("lz"):
            LZModel(cfg.model.omega, cfg.model.gamma0)
        else:
            for N in cfg.lengths:
                cfg.chain_model(N)
        cfg.krotov()
        g = cfg.grid
        if g.steps is None and g.norm_dt is None and g.max_dt is None:
            raise ConfigError("grid: give steps, norm_dt or max_dt")
        for name in ("norm_dt", "max_dt"):
            v = getattr(g, name)
            if v is not None and v <= 0:
                raise ConfigError(f"grid.{name} must be positive")
        if (g.steps is not None and g.steps < 1) or g.min_steps < 1:
            raise ConfigError("grid.steps and grid.min_steps must be >= 1")
        if cfg.curvature is not None:
            if cfg.curvature.ratio <= 1 or cfg.curvature.window < 1 or cfg.curvature.window % 2 == 0:
                raise ConfigError("curvature: ratio must exceed 1 and window must be odd")
        if cfg.times is not None and any(t <= 0 for t in cfg.times):
            raise ConfigError("times must be positive")
        if cfg.gamma0_over_omega is not None and any(r >= 0 for r in cfg.gamma0_over_omega):
            raise ConfigError("gamma0_over_omega entries must be negative")
        if cfg.t_factors is not None:
            f = cfg.t_factors
            if any(v <= 0 for v in f) or any(b <= a for a, b in zip(f, f[1:])):
                raise ConfigError("t_factors must be positive and strictly increasing")
        if cfg.scan is not None:
            for N in cfg.lengths:
                ThresholdScanConfig(cfg.t_grid_for(N), cfg.scan.infidelity_target,
                                    cfg.scan.iteration_budget, cfg.scan.bisection_depth)
        if cfg.bounds is not None and cfg.bounds.profile_lengths is not None:
            missing = set(cfg.bounds.profile_lengths) - set(cfg.lengths)
            if missing:
                raise ConfigError(f"bounds.profile_lengths not in lengths: {sorted(missing)}")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"experiment": cfg.experiment}
    for name in SECTIONS[cfg.experiment]:
        sec = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: _plain(v) for k, v in sec.items()}
    for name in LISTS[cfg.experiment]:
        v = getattr(cfg, name)
        if v is not None:
            out[name] = list(v)
    return out


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(path: str | os.PathLike, kind: str | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(raw, kind)


def apply_overrides(raw: dict[str, Any], assignments: Iterable[str]) -> dict[str, Any]:
    """Apply ``a.b=value`` overrides (value parsed as YAML) to a raw config mapping."""
    raw = json.loads(json.dumps(raw))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
    return raw


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Writer:
    """Collects the files a run writes, for the manifest."""

    def __init__(self, out_dir: Path, dat_aliases: bool) -> None:
        self.out = out_dir
        self.dat = dat_aliases
        self.files: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, units: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        rows = [list(r) for r in rows]
        lines = [units, ",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
        path = self.out / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.files.append(path)
        if self.dat:
            dat = path.with_suffix(".dat")
            body = [units, "# " + " ".join(header)] + [" ".join(_fmt(v) for v in r) for r in rows]
            dat.write_text("\n".join(body) + "\n", encoding="utf-8")
            self.files.append(dat)
        return path

    def json(self, name: str, payload: Any) -> Path:
        path = self.out / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.files.append(path)
        return path


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def _tag(value: float) -> str:
    return format(float(value), ".10g")


@dataclass
class RunResult:
    kind: str
    out_dir: Path
    files: list[Path]
    summary: dict[str, Any]
    all_failed: bool = False
    manifest: Path | None = None
    data: dict[str, Any] = field(default_factory=dict, repr=False)


def _versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "qslopt": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pyyaml": yaml.__version__,
    }


def _write_manifest(cfg: ExperimentConfig, writer: _Writer, stages: dict[str, float], jobs: int) -> Path:
    inventory = [
        {"file": p.name, "bytes": p.stat().st_size, "sha256": file_sha256(p)}
        for p in sorted(writer.files, key=lambda p: p.name)
    ]
    payload = {
        "config": config_to_dict(cfg),
        "versions": _versions(),
        "jobs": jobs,
        "stage_seconds": stages,
        "outputs": inventory,
    }
    path = writer.out / "manifest.json"
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _pool_map(fn: Callable[[Any], Any], tasks: Sequence[Any], jobs: int) -> list[Any]:
    """Ordered map; results follow task order whatever the completion order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# workers (module level so they pickle)


def _max_rise(trace: np.ndarray) -> float:
    return float(np.max(np.diff(trace))) if trace.size > 1 else 0.0


def _lz_task(args: tuple[ExperimentConfig, float, float]) -> dict[str, Any]:
    cfg, gamma0, T = args
    model = LZModel(cfg.model.omega, gamma0)
    grid = cfg.grid_for(model, T)
    rec = optimize(model, model.guess_pulse(grid), cfg.krotov())
    return {
        "T": T,
        "steps": grid.steps,
        "trace": rec.infidelity_trace,
        "stop_reason": rec.stop_reason,
        "lambdas": rec.lambdas,
        "doublings": rec.doublings,
        "max_pulse": float(np.max(np.abs(rec.final_pulse.samples))),
    }


def _chain_scan_task(args: tuple[ExperimentConfig, int]) -> dict[str, Any]:
    cfg, N = args
    model = cfg.chain_model(N)
    s = cfg.scan
    scan = ThresholdScanConfig(cfg.t_grid_for(N), s.infidelity_target, s.iteration_budget,
                               s.bisection_depth, s.probe_all)
    out: dict[str, Any] = {"N": N, "t_grid": list(scan.t_grid)}
    try:
        est = threshold_time_scan(model, scan, cfg.krotov(), grid_for=lambda T: cfg.grid_for(model, T))
    except ScanFailedError as exc:
        out.update(failed=True, best=exc.best, error=str(exc))
        return out
    except KrotovError as exc:
        out.update(failed=True, best=(math.nan, math.nan), error=str(exc))
        return out
    rec = est.details["record"]
    pts = est.details["points"]
    out.update(
        failed=False,
        t_star=est.t_qsl,
        iterations=est.details["iterations"],
        infidelity=est.details["infidelity"],
        at_grid_floor=est.details["at_grid_floor"],
        warnings=est.details["warnings"],
        points=[(p.T, p.infidelity, p.iterations, p.success) for p in pts],
        max_rise=max(_max_rise(np.asarray(p.record.infidelity_trace)) for p in pts),
        pulse=rec.final_pulse.samples,
        pulse_T=rec.final_pulse.grid.total_time,
        pulse_steps=rec.final_pulse.grid.steps,
    )
    return out


# ---------------------------------------------------------------------------
# analysis helpers


def curvature_label(stat: float, zero_band: float) -> str:
    if not math.isfinite(stat):
        return "undefined"
    if abs(stat) <= zero_band:
        return "zero"
    return "positive" if stat > 0 else "negative"


def linear_fit(x: Sequence[float], y: Sequence[float]) -> dict[str, Any]:
    """Least-squares line y = slope * x + intercept with R^2; undefined below two points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        return {"defined": False, "slope": None, "intercept": None, "r_squared": None,
                "points": [[float(a), float(b)] for a, b in zip(x, y)]}
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"defined": True, "slope": float(slope), "intercept": float(intercept), "r_squared": r2,
            "residual_rms": float(np.sqrt(np.mean(resid**2))),
            "points": [[float(a), float(b)] for a, b in zip(x, y)]}


def profile_shape_metrics(profile: EnergySpreadProfile) -> dict[str, Any]:
    """Quantified "almost constant save near the final time" criterion.

    central_rel_std: std / mean of the spread over the central 80% of [0, T];
    peak_time_fraction: t / T where |spread - central mean| is largest.
    Passes when central_rel_std < 0.25 and the peak lies in the final 10%.
    """
    t = profile.times
    v = profile.spread_values
    T0, T = t[0], t[-1]
    frac = (t - T0) / (T - T0)
    central = (frac >= 0.1) & (frac <= 0.9)
    mean_c = float(np.mean(v[central]))
    rel_std = float(np.std(v[central]) / mean_c) if mean_c > 0 else math.inf
    dev = np.abs(v - mean_c)
    peak = int(np.argmax(dev))
    peak_frac = float(frac[peak])
    return {
        "central_mean": mean_c,
        "central_rel_std": rel_std,
        "peak_time_fraction": peak_frac,
        "peak_deviation": float(dev[peak]),
        "passes": bool(rel_std < 0.25 and peak_frac >= 0.9),
    }


# ---------------------------------------------------------------------------
# experiments


def run_lz_convergence(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Convergence traces and curvature for each T; summary.json per-T statistics."""
    stages: dict[str, float] = {}
    writer = _Writer(Path(cfg.output.dir), cfg.output.dat_aliases)
    t0 = time.perf_counter()
    results = _pool_map(_lz_task, [(cfg, cfg.model.gamma0, T) for T in cfg.times], jobs)
    stages["optimize"] = time.perf_counter() - t0
    cv = cfg.curvature
    per_T = []
    for r in results:
        trace = r["trace"]
        writer.csv(f"convergence_T{_tag(r['T'])}.csv", LZ_UNITS, ["iteration", "infidelity"],
                   zip(range(trace.size), trace))
        try:
            c = loglog_second_derivative(trace, cv.ratio, cv.window)
            stat = asymptotic_curvature(trace, cv.ratio, cv.window)
            rows = zip(c.log_n, c.d2)
        except ValueError:
            stat, rows = math.nan, []
        writer.csv(f"curvature_T{_tag(r['T'])}.csv", LZ_UNITS, ["log_n", "d2"], rows)
        per_T.append({
            "T": r["T"],
            "steps": r["steps"],
            "iterations": int(trace.size - 1),
            "final_infidelity": float(trace[-1]),
            "curvature_statistic": stat,
            "curvature_sign": curvature_label(stat, cv.zero_band),
            "stop_reason": r["stop_reason"],
            "max_infidelity_rise": _max_rise(trace),
            "max_abs_pulse": r["max_pulse"],
            "lambdas": list(r["lambdas"]),
        })
    model = LZModel(cfg.model.omega, cfg.model.gamma0)
    psi0, psiG = model.boundary_states()
    summary = {
        "experiment": cfg.experiment,
        "gamma0_over_omega": cfg.model.gamma0 / cfg.model.omega,
        "t_eq2": bhattacharyya_static_tqsl(model.hamiltonian([0.0]), psi0, psiG).t_qsl,
        "runs": per_T,
    }
    writer.json("summary.json", summary)
    stages["total"] = time.perf_counter() - t0
    manifest = _write_manifest(cfg, writer, stages, jobs)
    return RunResult(cfg.experiment, writer.out, writer.files, summary, manifest=manifest,
                     data={"traces": {r["T"]: r["trace"] for r in results}})


def run_lz_qsl_compare(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Curvature crossing versus the static estimate for each gamma0/omega."""
    stages: dict[str, float] = {}
    writer = _Writer(Path(cfg.output.dir), cfg.output.dat_aliases)
    w = cfg.model.omega
    factors = cfg.t_factors or DEFAULT_T_FACTORS
    t0 = time.perf_counter()
    teq = {}
    tasks = []
    for ratio in cfg.gamma0_over_omega:
        model = LZModel(w, ratio * w)
        psi0, psiG = model.boundary_states()
        teq[ratio] = bhattacharyya_static_tqsl(model.hamiltonian([0.0]), psi0, psiG).t_qsl
        tasks += [(cfg, ratio * w, f * teq[ratio]) for f in factors]
    results = _pool_map(_lz_task, tasks, jobs)
    stages["optimize"] = time.perf_counter() - t0
    by_run = {(t[1], t[2]): r for t, r in zip(tasks, results)}
    cv = cfg.curvature
    rows, per_ratio = [], []
    for ratio in cfg.gamma0_over_omega:
        ts = [f * teq[ratio] for f in factors]
        recs = {T: by_run[(ratio * w, T)] for T in ts}
        entry: dict[str, Any] = {"gamma0_over_omega": ratio, "t_eq2": teq[ratio]}
        try:
            est = detect_tqsl_curvature(
                None, ts, run=lambda T: _TraceView(recs[T]["trace"]), ratio=cv.ratio, window=cv.window
            )
            tc = est.t_qsl
            entry.update(bracketed=True, statistic=est.details["statistic"],
                         bracket=list(est.details["bracket"]), direction=est.details["direction"])
        except UnbracketedError as exc:
            tc = math.nan
            entry.update(bracketed=False, statistic=exc.details["statistic"])
        gap = abs(tc - teq[ratio]) / teq[ratio] if math.isfinite(tc) else math.nan
        entry.update(
            t_curvature=tc, relative_gap=gap, T=ts,
            final_infidelity=[float(recs[T]["trace"][-1]) for T in ts],
            iterations=[int(recs[T]["trace"].size - 1) for T in ts],
            max_infidelity_rise=max(_max_rise(recs[T]["trace"]) for T in ts),
        )
        per_ratio.append(entry)
        rows.append([ratio, teq[ratio], tc, gap])
    writer.csv("qsl_compare.csv", LZ_UNITS, ["gamma0_over_omega", "t_eq2", "t_curvature", "relative_gap"], rows)
    summary = {"experiment": cfg.experiment, "t_factors": list(factors), "ratios": per_ratio}
    writer.json("compare_summary.json", summary)
    stages["total"] = time.perf_counter() - t0
    manifest = _write_manifest(cfg, writer, stages, jobs)
    all_failed = not any(e["bracketed"] for e in per_ratio)
    return RunResult(cfg.experiment, writer.out, writer.files, summary, all_failed, manifest,
                     data={"traces": {(t[1], t[2]): r["trace"] for t, r in zip(tasks, results)}})


@dataclass
class _TraceView:
    infidelity_trace: np.ndarray


def _scan_outputs(cfg: ExperimentConfig, writer: _Writer, results: list[dict[str, Any]]) -> dict[str, Any]:
    rows = []
    for r in results:
        if r["failed"]:
            rows.append([r["N"], math.nan, 0, r["best"][1]])
        else:
            rows.append([r["N"], r["t_star"], r["iterations"], r["infidelity"]])
    writer.csv("scaling.csv", CHAIN_UNITS, ["N", "T_star", "converged_iterations", "I_reached"], rows)
    ok = [r for r in results if not r["failed"] and r["N"] >= cfg.scan.fit_min_length]
    fit = linear_fit([r["N"] for r in ok], [r["t_star"] for r in ok])
    fit.update(
        lengths=[r["N"] for r in ok],
        failed_lengths=[r["N"] for r in results if r["failed"]],
        fit_min_length=cfg.scan.fit_min_length,
        infidelity_target=cfg.scan.infidelity_target,
        iteration_budget=cfg.scan.iteration_budget,
    )
    writer.json("fit.json", fit)
    return fit


def _scan_details(results: list[dict[str, Any]]) -> list[dict[str, Any]]:
    keep = ("N", "failed", "t_star", "iterations", "infidelity", "at_grid_floor", "warnings",
            "points", "max_rise", "t_grid", "best", "error")
    return [{k: r[k] for k in keep if k in r} for r in results]


def run_chain_threshold_scan(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Threshold scan per chain length and a linear fit of T*(N)."""
    stages: dict[str, float] = {}
    writer = _Writer(Path(cfg.output.dir), cfg.output.dat_aliases)
    t0 = time.perf_counter()
    results = _pool_map(_chain_scan_task, [(cfg, N) for N in cfg.lengths], jobs)
    stages["scan"] = time.perf_counter() - t0
    fit = _scan_outputs(cfg, writer, results)
    summary = {"experiment": cfg.experiment, "fit": fit, "scans": _scan_details(results)}
    writer.json("scan_summary.json", summary)
    stages["total"] = time.perf_counter() - t0
    manifest = _write_manifest(cfg, writer, stages, jobs)
    return RunResult(cfg.experiment, writer.out, writer.files, summary,
                     all(r["failed"] for r in results), manifest, data={"scans": results})


def run_chain_bound_compare(
    cfg: ExperimentConfig, jobs: int = 1, scans: list[dict[str, Any]] | None = None
) -> RunResult:
    """Per-site bounds from the optimized pulses at T*, compared with T*.

    ``scans`` may carry results of an earlier scan with the same config;
    otherwise the scan runs first.
    """
    stages: dict[str, float] = {}
    writer = _Writer(Path(cfg.output.dir), cfg.output.dat_aliases)
    t0 = time.perf_counter()
    if scans is None:
        scans = _pool_map(_chain_scan_task, [(cfg, N) for N in cfg.lengths], jobs)
    stages["scan"] = time.perf_counter() - t0
    fit = _scan_outputs(cfg, writer, scans)
    want = set(cfg.bounds.profile_lengths or cfg.lengths)
    rows, entries = [], []
    for r in scans:
        if r["failed"]:
            entries.append({"N": r["N"], "failed": True})
            continue
        model = cfg.chain_model(r["N"])
        grid = TimeGrid(r["pulse_T"], r["pulse_steps"])
        pulse = model.guess_pulse(grid).with_samples(np.asarray(r["pulse"]))
        p1 = mean_energy_spread(model, pulse, 1)
        p2 = mean_energy_spread(model, pulse, 2)
        b = per_site_bound(p1, p2, r["N"])
        b1, b2 = b.details["bound1"], b.details["bound2"]
        eta = max(b1, b2) / r["t_star"]
        rows.append([r["N"], b1, b2, r["t_star"], eta])
        shape = profile_shape_metrics(p2)
        entries.append({
            "N": r["N"], "failed": False, "bound1": b1, "bound2": b2, "t_star": r["t_star"], "eta": eta,
            "t_star_over_bound": r["t_star"] / max(b1, b2), "mean_dE1": p1.mean, "mean_dE2": p2.mean,
            "dE1_state": p1.chosen_fixed_state, "profile_shape": shape,
        })
        if r["N"] in want:
            writer.csv(f"spread_profile_N{r['N']}.csv", CHAIN_UNITS, ["t", "dE2"],
                       zip(p2.times, p2.spread_values))
    writer.csv("bounds.csv", CHAIN_UNITS, ["N", "bound1", "bound2", "t_star", "eta"], rows)
    etas = [e["eta"] for e in entries if not e.get("failed")]
    summary = {
        "experiment": cfg.experiment,
        "fit": fit,
        "bounds": entries,
        "eta_mean": float(np.mean(etas)) if etas else None,
        "eta_relative_spread": float(np.ptp(etas) / np.mean(etas)) if etas else None,
        "scans": _scan_details(scans),
    }
    writer.json("bounds_summary.json", summary)
    stages["total"] = time.perf_counter() - t0
    manifest = _write_manifest(cfg, writer, stages, jobs)
    return RunResult(cfg.experiment, writer.out, writer.files, summary,
                     all(r["failed"] for r in scans), manifest, data={"scans": scans})


RUNNERS: dict[str, Callable[..., RunResult]] = {
    "lz-convergence": run_lz_convergence,
    "lz-qsl-compare": run_lz_qsl_compare,
    "chain-threshold-scan": run_chain_threshold_scan,
    "chain-bound-compare": run_chain_bound_compare,
}


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    return RUNNERS[cfg.experiment](cfg, jobs=jobs)
