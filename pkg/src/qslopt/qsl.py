"""Speed-limit estimators.

* ``bhattacharyya_static_tqsl``: arccos|<psi0|psiG>| / dE for a time-independent H0.
* ``mean_energy_spread`` / ``per_site_bound``: time-averaged energy spreads of a
  driven system and the resulting per-site transfer-time bound.
* ``loglog_second_derivative`` / ``detect_tqsl_curvature``: sign of the curvature
  of log I versus log n separates saturating from exponentially converging runs.
* ``threshold_time_scan``: smallest duration reaching a target infidelity within
  an iteration budget.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .core import ControlPulse, HermitianOperator, QuantumState, TimeGrid, energy_stats, overlap
from .krotov import KrotovConfig, OptimizationRecord, forward_trajectory, optimize
from .models import ControlledModel

log = logging.getLogger(__name__)

__all__ = [
    "QSLError",
    "UnbracketedError",
    "ScanFailedError",
    "QSLEstimate",
    "EnergySpreadProfile",
    "ThresholdScanConfig",
    "Curvature",
    "bhattacharyya_static_tqsl",
    "mean_energy_spread",
    "per_site_bound",
    "loglog_second_derivative",
    "asymptotic_curvature",
    "make_grid",
    "detect_tqsl_curvature",
    "threshold_time_scan",
]

METHODS = (
    "bhattacharyya_static",
    "curvature",
    "threshold_scan",
    "mean_spread_bound_1",
    "mean_spread_bound_2",
)
INFIDELITY_FLOOR = 1e-16


class QSLError(ValueError):
    pass


class UnbracketedError(QSLError):
    """The curvature statistic never changes sign on the supplied T-grid."""


class ScanFailedError(QSLError):
    """No duration on the grid reached the target; ``best`` holds (T, I)."""

    def __init__(self, msg: str, best: tuple[float, float]):
        super().__init__(msg)
        self.best = best


@dataclass
class QSLEstimate:
    t_qsl: float
    method: str
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (np.isfinite(self.t_qsl) and self.t_qsl > 0):
            raise QSLError(f"speed-limit time must be positive, got {self.t_qsl!r}")


@dataclass
class EnergySpreadProfile:
    times: np.ndarray
    spread_values: np.ndarray
    mean: float
    lambda_choice: int
    chosen_fixed_state: str  # "initial", "target" or "n/a"

    @property
    def total_time(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass(frozen=True)
class ThresholdScanConfig:
    t_grid: tuple[float, ...]
    infidelity_target: float = 5e-5
    iteration_budget: int = 100_000
    bisection_depth: int = 4
    probe_all: bool = False

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.t_grid)
        if not grid or any(t <= 0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("t_grid must be non-empty, positive and strictly increasing")
        object.__setattr__(self, "t_grid", grid)
        if not 0 < self.infidelity_target < 1:
            raise ValueError("infidelity_target must lie in (0, 1)")
        if self.iteration_budget < 0 or self.bisection_depth < 0:
            raise ValueError("budget and depth must be non-negative")


# ---------------------------------------------------------------------------
# analytic / averaged bounds


def bhattacharyya_static_tqsl(
    H0: HermitianOperator, psi0: QuantumState, psiG: QuantumState
) -> QSLEstimate:
    """Time-independent estimate arccos|<psi0|psiG>| / spread(H0, psi0)."""
    _, spread = energy_stats(H0, psi0)
    if spread <= 1e-14:
        raise QSLError("initial state is an eigenstate of H0 (zero energy spread)")
    ov = min(1.0, abs(overlap(psi0, psiG)))
    angle = float(np.arccos(ov))
    return QSLEstimate(angle / spread, "bhattacharyya_static",
                       {"energy_spread": spread, "overlap": ov, "angle": angle})


def _trapezoid_mean(times: np.ndarray, values: np.ndarray) -> float:
    return float(np.trapezoid(values, times) / (times[-1] - times[0]))


def mean_energy_spread(model: ControlledModel, pulse: ControlPulse, lambda_choice: int) -> EnergySpreadProfile:
    """Energy spread of H(t_j) on a reference state, averaged over [0, T].

    lambda_choice 1: the fixed boundary state (initial or target) with the smaller
    mean. lambda_choice 2: the evolving state psi(t_j).
    """
    grid = pulse.grid
    t = grid.times
    Hs = [model.hamiltonian_at_node(pulse, j) for j in range(grid.steps + 1)]
    if lambda_choice == 1:
        best = None
        for label, phi in zip(("initial", "target"), model.boundary_states()):
            vals = np.array([energy_stats(H, phi)[1] for H in Hs])
            prof = EnergySpreadProfile(t, vals, _trapezoid_mean(t, vals), 1, label)
            if best is None or prof.mean < best.mean:
                best = prof
        return best
    if lambda_choice == 2:
        traj = forward_trajectory(model, pulse)
        vals = np.array([energy_stats(H, QuantumState(v / np.linalg.norm(v)))[1] for H, v in zip(Hs, traj)])
        return EnergySpreadProfile(t, vals, _trapezoid_mean(t, vals), 2, "n/a")
    raise ValueError(f"lambda_choice must be 1 or 2, got {lambda_choice!r}")


def per_site_bound(profile1: EnergySpreadProfile, profile2: EnergySpreadProfile, N: int) -> QSLEstimate:
    """(N - 1) * max(pi / (2 dE1), pi / (2 dE2))."""
    if N < 2:
        raise ValueError("N must be at least 2")
    if profile1.mean <= 0 or profile2.mean <= 0:
        raise QSLError("mean energy spread must be positive")
    b1 = (N - 1) * np.pi / (2.0 * profile1.mean)
    b2 = (N - 1) * np.pi / (2.0 * profile2.mean)
    method = "mean_spread_bound_1" if b1 >= b2 else "mean_spread_bound_2"
    return QSLEstimate(float(max(b1, b2)), method, {"bound1": float(b1), "bound2": float(b2)})


# ---------------------------------------------------------------------------
# convergence-trace curvature


@dataclass
class Curvature:
    log_n: np.ndarray
    d2: np.ndarray
    clamped: bool


def loglog_second_derivative(trace: Sequence[float], ratio: float = 1.05, window: int = 9) -> Curvature:
    """d^2 log I / d (log n)^2 from an infidelity trace indexed by iteration n.

    log I is interpolated onto a uniform log n grid with spacing log(ratio), smoothed
    with a ``window``-point moving average and differenced with a centred stencil.
    The guess value I(0) has no log n and is skipped. The grid starts at
    n = 1 / (ratio - 1), below which the samples are sparser than the grid and
    interpolation would insert spurious straight segments.
    """
    if not ratio > 1.0:
        raise ValueError("ratio must exceed 1")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    I = np.asarray(trace, dtype=np.float64)[1:]
    clamped = bool(np.any(I < INFIDELITY_FLOOR))
    if clamped:
        warnings.warn("non-positive infidelities clamped to 1e-16", RuntimeWarning, stacklevel=2)
        I = np.maximum(I, INFIDELITY_FLOOR)
    h = np.log(ratio)
    ln = np.log(np.arange(1, I.size + 1))
    if ln.size == 0:
        raise ValueError("trace is too short for the curvature estimate")
    start = int(np.ceil(np.log(1.0 / (ratio - 1.0)) / h - 1e-9)) if ratio < np.e else 0
    u = np.arange(start, int(np.floor(ln[-1] / h + 1e-9)) + 1) * h
    if u.size < window + 2:
        raise ValueError(
            f"trace of {I.size} iterations is too short for window {window} at ratio {ratio}"
        )
    y = np.interp(u, ln, np.log(I))
    kernel = np.ones(window) / window
    ys = np.convolve(y, kernel, mode="valid")
    us = u[window // 2: u.size - window // 2]
    d2 = (ys[2:] - 2.0 * ys[1:-1] + ys[:-2]) / h**2
    return Curvature(us[1:-1], d2, clamped)


def asymptotic_curvature(trace: Sequence[float], ratio: float = 1.05, window: int = 9) -> float:
    """Median curvature over the last decade of iterations."""
    c = loglog_second_derivative(trace, ratio, window)
    tail = c.log_n >= c.log_n[-1] - np.log(10.0)
    return float(np.median(c.d2[tail]))


# ---------------------------------------------------------------------------
# scans


def make_grid(
    model: ControlledModel,
    total_time: float,
    norm_dt: float | None = 0.1,
    max_dt: float | None = None,
    steps: int | None = None,
    min_steps: int = 100,
) -> TimeGrid:
    """Time grid for ``total_time``.

    An explicit ``steps`` wins. Otherwise dt is capped by ``max_dt`` and by
    ``norm_dt / max_j ||H(guess at t_j)||``.
    """
    if steps is not None:
        return TimeGrid(total_time, steps)
    dt = np.inf if max_dt is None else float(max_dt)
    if norm_dt is not None:
        probe = TimeGrid(total_time, 1000)
        pulse = model.guess_pulse(probe)
        norm = max(
            np.max(np.abs(np.linalg.eigvalsh(model.hamiltonian(pulse.samples[:, j]).matrix)))
            for j in range(probe.steps + 1)
        )
        if norm > 0:
            dt = min(dt, norm_dt / norm)
    if not np.isfinite(dt):
        raise ValueError("no step-size rule given")
    return TimeGrid(total_time, max(min_steps, int(np.ceil(total_time / dt - 1e-9))))


TraceRunner = Callable[[float], OptimizationRecord]


def _default_runner(model: ControlledModel, cfg: KrotovConfig, grid_for: Callable[[float], TimeGrid]) -> TraceRunner:
    def run(T: float) -> OptimizationRecord:
        return optimize(model, model.guess_pulse(grid_for(T)), cfg)
    return run


def detect_tqsl_curvature(
    model: ControlledModel | None,
    t_grid: Sequence[float],
    cfg: KrotovConfig | None = None,
    grid_for: Callable[[float], TimeGrid] | None = None,
    run: TraceRunner | None = None,
    ratio: float = 1.05,
    window: int = 9,
) -> QSLEstimate:
    """T at which the asymptotic log-log curvature of the trace changes sign.

    ``run(T)`` may replace the optimizer (it must return an object with an
    ``infidelity_trace``). The first sign change along the increasing T-grid is
    located by linear interpolation.
    """
    ts = [float(t) for t in t_grid]
    if run is None:
        if model is None or cfg is None:
            raise ValueError("model and cfg are required without a custom runner")
        run = _default_runner(model, cfg, grid_for or (lambda T: make_grid(model, T)))
    stats, finals = [], []
    for T in ts:
        rec = run(T)
        stats.append(asymptotic_curvature(rec.infidelity_trace, ratio, window))
        finals.append(float(rec.infidelity_trace[-1]))
        log.info("T=%.6g curvature=%+.4g I=%.3e", T, stats[-1], finals[-1])
    details = {"T": ts, "statistic": stats, "final_infidelity": finals}
    for i in range(len(ts) - 1):
        s0, s1 = stats[i], stats[i + 1]
        if s0 == 0.0:
            return QSLEstimate(ts[i], "curvature", details)
        if np.sign(s0) != np.sign(s1):
            T = ts[i] + (ts[i + 1] - ts[i]) * s0 / (s0 - s1)
            details["bracket"] = (ts[i], ts[i + 1])
            details["direction"] = "falling" if s0 > 0 else "rising"
            return QSLEstimate(float(T), "curvature", details)
    err = UnbracketedError(f"curvature statistic has no sign change on T-grid {ts}")
    err.details = details
    raise err


@dataclass
class ScanPoint:
    T: float
    infidelity: float
    iterations: int
    success: bool
    record: Any = field(default=None, repr=False)


def threshold_time_scan(
    model: ControlledModel | None,
    scan: ThresholdScanConfig,
    cfg: KrotovConfig | None = None,
    grid_for: Callable[[float], TimeGrid] | None = None,
    run: TraceRunner | None = None,
) -> QSLEstimate:
    """Smallest T reaching ``scan.infidelity_target`` within the iteration budget.

    Reachability is assumed monotone in T: the grid is walked upward until the
    first success, then the bracketing interval is bisected ``bisection_depth``
    times. With ``probe_all`` every grid point is evaluated and non-monotone
    outcomes are reported as warnings.
    """
    if run is None:
        if model is None or cfg is None:
            raise ValueError("model and cfg are required without a custom runner")
        run_cfg = replace(cfg, target_infidelity=scan.infidelity_target, max_iterations=scan.iteration_budget)
        run = _default_runner(model, run_cfg, grid_for or (lambda T: make_grid(model, T)))

    points: list[ScanPoint] = []

    def probe(T: float) -> ScanPoint:
        rec = run(T)
        I = float(rec.infidelity_trace[-1])
        p = ScanPoint(T, I, len(rec.infidelity_trace) - 1, I <= scan.infidelity_target, rec)
        points.append(p)
        log.info("scan T=%.6g I=%.3e n=%d %s", T, I, p.iterations, "ok" if p.success else "fail")
        return p

    grid_pts: list[ScanPoint] = []
    for T in scan.t_grid:
        grid_pts.append(probe(T))
        if grid_pts[-1].success and not scan.probe_all:
            break
    notes: list[str] = []
    first = next((i for i, p in enumerate(grid_pts) if p.success), None)
    if first is None:
        best = min(grid_pts, key=lambda p: p.infidelity)
        raise ScanFailedError(
            f"no T on the grid reached I <= {scan.infidelity_target:g}", (best.T, best.infidelity)
        )
    for p in grid_pts[first + 1:]:
        if not p.success:
            notes.append(f"non-monotone reachability: T={p.T:g} failed above T={grid_pts[first].T:g}")
    hi = grid_pts[first]
    if first > 0:
        lo = grid_pts[first - 1]
        for _ in range(scan.bisection_depth):
            mid = probe(0.5 * (lo.T + hi.T))
            if mid.success:
                hi = mid
            else:
                lo = mid
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    details = {
        "points": points,
        "record": hi.record,
        "infidelity": hi.infidelity,
        "iterations": hi.iterations,
        "warnings": notes,
        "at_grid_floor": first == 0,
    }
    return QSLEstimate(hi.T, "threshold_scan", details)
