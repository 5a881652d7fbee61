"""First-order sequential Krotov optimization for state-to-state transfer.

One iteration:

1. forward-propagate psi under the current pulse;
2. seed the costate chi(T) = <psi_G|psi(T)> |psi_G> and propagate it backward;
3. sweep forward, updating every control at node j by
   (S(t_j) / lambda_k) * Im <chi(t_j)| dH/dx_k |psi_new(t_j)>
   and immediately stepping psi_new with the updated value.

The matrix element uses dH/dx_k averaged over the propagation step (see
``_kernels.step_gradient``), so that it is the exact derivative of the
piecewise-constant propagator: dI/dx_k(t_j) = -2 dt Im<chi_j|dH/dx_k|psi_j>.

If a sweep raises the infidelity, every lambda is doubled and the sweep is
retried from the unchanged pulse.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .core import ControlPulse, QuantumState, TimeGrid, infidelity
from .models import ControlledModel

log = logging.getLogger(__name__)

__all__ = [
    "KrotovError",
    "KrotovConfig",
    "OptimizationRecord",
    "update_shape",
    "default_lambdas",
    "krotov_sweep",
    "optimize",
    "gradient_check",
    "pulse_infidelity",
    "forward_trajectory",
    "pulse_gradient",
]

SHAPES = ("sin2", "box", "one")
# rises below this are attributed to round-off and never trigger a retry
RETRY_TOL = 1e-14


class KrotovError(RuntimeError):
    pass


@dataclass(frozen=True)
class KrotovConfig:
    """Optimizer settings.

    lambdas
        Inverse step sizes, one per control. None selects 1 / (2 max|guess_k|).
    shape
        Update shape: "sin2" = sin^2(pi t / T); "box" = 1 except zero at t = 0
        and t = T; "one" = 1 everywhere (endpoints not pinned).
    bounds
        Optional box constraint per control name; updates are clipped.
    """

    lambdas: tuple[float, ...] | None = None
    shape: str = "sin2"
    max_iterations: int = 1000
    target_infidelity: float = 1e-4
    stall_window: int = 500
    stall_threshold: float = 1e-6
    max_doublings: int = 30
    bounds: Mapping[str, tuple[float, float]] | None = None
    backend: str = "auto"

    def __post_init__(self) -> None:
        if self.lambdas is not None:
            lam = tuple(float(v) for v in self.lambdas)
            if any(not (np.isfinite(v) and v > 0) for v in lam):
                raise ValueError(f"lambdas must be positive, got {lam}")
            object.__setattr__(self, "lambdas", lam)
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0 < self.target_infidelity < 1:
            raise ValueError("target_infidelity must lie in (0, 1)")
        if self.stall_window < 1:
            raise ValueError("stall_window must be >= 1")
        if self.backend not in ("auto", "compiled", "reference"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class OptimizationRecord:
    infidelity_trace: np.ndarray
    final_pulse: ControlPulse
    converged: bool
    iterations_used: int
    stop_reason: str
    lambdas: tuple[float, ...] = ()
    doublings: int = 0

    @property
    def final_infidelity(self) -> float:
        return float(self.infidelity_trace[-1])


def update_shape(kind: str, grid: TimeGrid) -> np.ndarray:
    t = grid.times
    if kind == "sin2":
        s = np.sin(np.pi * t / grid.total_time) ** 2
        s[0] = s[-1] = 0.0
        return s
    s = np.ones_like(t)
    if kind == "box":
        s[0] = s[-1] = 0.0
    return s


def default_lambdas(guess: ControlPulse) -> tuple[float, ...]:
    scale = np.max(np.abs(guess.samples), axis=1)
    scale[scale == 0] = 0.5
    return tuple(float(v) for v in 1.0 / (2.0 * scale))


def _bounds_array(model: ControlledModel, cfg: KrotovConfig) -> np.ndarray:
    b = np.array(model.default_bounds(), dtype=np.float64)
    for name, (lo, hi) in (cfg.bounds or {}).items():
        if name not in model.control_names:
            raise ValueError(f"bound for unknown control {name!r}")
        b[model.control_names.index(name)] = (lo, hi)
    return b


# ---------------------------------------------------------------------------
# propagation engines


class _CompiledEngine:
    """Real symmetric tridiagonal models; all loops run in ``_kernels``."""

    def __init__(self, model: ControlledModel, grid: TimeGrid) -> None:
        kind, params = model.kernel_spec()
        self.kind = kind
        self.params = np.asarray(params, dtype=np.float64)
        self.dt = grid.dt
        self.M = grid.steps
        self.n = model.dim
        self.shift = np.ascontiguousarray(model.shift_on(grid), dtype=np.float64)

    def prepare(self, x):
        E = np.empty((self.M, self.n))
        Q = np.empty((self.M, self.n, self.n))
        _kernels.eig_all(self.kind, self.params, np.ascontiguousarray(x), self.shift, E, Q)
        return E, Q

    def forward(self, cache, psi0):
        traj = np.empty((self.M + 1, self.n), dtype=np.complex128)
        _kernels.forward(cache[0], cache[1], self.dt, psi0, traj)
        return traj

    def backward(self, cache, chiT):
        traj = np.empty((self.M + 1, self.n), dtype=np.complex128)
        _kernels.backward(cache[0], cache[1], self.dt, chiT, traj)
        return traj

    def sweep(self, x, cache, chi, shape, inv_lam, bounds, psi0):
        E, Q = cache
        x_new = np.empty_like(x)
        psi = np.empty((self.M + 1, self.n), dtype=np.complex128)
        E_new = np.empty_like(E)
        Q_new = np.empty_like(Q)
        ok = _kernels.sequential_sweep(
            self.kind, self.params, x, self.shift, self.dt, shape, inv_lam, bounds,
            psi0, chi, E, Q, x_new, psi, E_new, Q_new,
        )
        return ok, x_new, psi, (E_new, Q_new)

    def gradient(self, x, cache, chi, psi):
        out = np.empty((x.shape[0], self.M))
        _kernels.trajectory_gradient(self.kind, self.params, x, cache[0], cache[1], self.dt, chi, psi, out)
        return out


class _DenseEngine:
    """Reference path for arbitrary models, built on dense eigendecompositions."""

    def __init__(self, model: ControlledModel, grid: TimeGrid) -> None:
        self.model = model
        self.dt = grid.dt
        self.M = grid.steps
        self.n = model.dim
        self.shift = model.shift_on(grid)

    def _eig(self, xj, j):
        H = self.model.hamiltonian(xj).matrix + self.shift[j] * np.eye(self.n)
        return np.linalg.eigh(H)

    def prepare(self, x):
        return [self._eig(x[:, j], j) for j in range(self.M)]

    def _step(self, eig, v, sign=1.0):
        E, Q = eig
        return Q @ (np.exp(-1j * sign * E * self.dt) * (Q.conj().T @ v))

    def forward(self, cache, psi0):
        traj = np.empty((self.M + 1, self.n), dtype=np.complex128)
        traj[0] = psi0
        for j in range(self.M):
            traj[j + 1] = self._step(cache[j], traj[j])
        return traj

    def backward(self, cache, chiT):
        traj = np.empty((self.M + 1, self.n), dtype=np.complex128)
        traj[self.M] = chiT
        for j in range(self.M - 1, -1, -1):
            traj[j] = self._step(cache[j], traj[j + 1], -1.0)
        return traj

    def _grad(self, xj, eig, chi, psi):
        E, Q = eig
        xab = np.subtract.outer(E, E) * self.dt
        with np.errstate(invalid="ignore", divide="ignore"):
            F = np.where(np.abs(xab) < 1e-8, 1.0 + 0.5j * xab, np.expm1(1j * xab) / (1j * xab))
        ct = Q.conj().T @ chi
        pt = Q.conj().T @ psi
        return np.array([
            np.vdot(ct, ((Q.conj().T @ V.matrix @ Q) * F) @ pt).imag
            for V in self.model.control_derivatives(xj)
        ])

    def sweep(self, x, cache, chi, shape, inv_lam, bounds, psi0):
        x_new = x.copy()
        psi = np.empty((self.M + 1, self.n), dtype=np.complex128)
        psi[0] = psi0
        new_cache = list(cache)
        for j in range(self.M):
            if shape[j] != 0.0:
                g = self._grad(x[:, j], cache[j], chi[j], psi[j])
                v = x[:, j] + shape[j] * inv_lam * g
                if not np.all(np.isfinite(v)):
                    return False, x_new, psi, new_cache
                x_new[:, j] = np.clip(v, bounds[:, 0], bounds[:, 1])
                new_cache[j] = self._eig(x_new[:, j], j)
            psi[j + 1] = self._step(new_cache[j], psi[j])
        return True, x_new, psi, new_cache

    def gradient(self, x, cache, chi, psi):
        return np.array([self._grad(x[:, j], cache[j], chi[j], psi[j]) for j in range(self.M)]).T


def _engine(model: ControlledModel, grid: TimeGrid, backend: str = "auto"):
    if backend == "reference" or (backend == "auto" and model.kernel_spec() is None):
        return _DenseEngine(model, grid)
    if model.kernel_spec() is None:
        raise KrotovError(f"{type(model).__name__} has no compiled kernel")
    return _CompiledEngine(model, grid)


def _check_pulse(model: ControlledModel, pulse: ControlPulse) -> None:
    if pulse.num_controls != len(model.control_names):
        raise KrotovError(
            f"pulse has {pulse.num_controls} controls, model expects {len(model.control_names)}"
        )


def _overlap_with(target: np.ndarray, final: np.ndarray) -> complex:
    return complex(np.vdot(target, final))


def _infid(target: np.ndarray, final: np.ndarray) -> float:
    return float(min(1.0, max(0.0, 1.0 - abs(np.vdot(target, final)) ** 2)))


# ---------------------------------------------------------------------------
# public operations


def krotov_sweep(
    model: ControlledModel, pulse: ControlPulse, cfg: KrotovConfig
) -> tuple[ControlPulse, float]:
    """One Krotov iteration at fixed lambdas (no retry)."""
    _check_pulse(model, pulse)
    grid = pulse.grid
    eng = _engine(model, grid, cfg.backend)
    psi0, psiG = (s.amplitudes for s in model.boundary_states())
    lam = cfg.lambdas if cfg.lambdas is not None else default_lambdas(pulse)
    if len(lam) != pulse.num_controls:
        raise KrotovError("one lambda per control is required")
    x = np.ascontiguousarray(pulse.samples, dtype=np.float64)
    cache = eng.prepare(x)
    psi = eng.forward(cache, psi0)
    chi = eng.backward(cache, _overlap_with(psiG, psi[-1]) * psiG)
    ok, x_new, psi_new, _ = eng.sweep(
        x, cache, chi, update_shape(cfg.shape, grid), 1.0 / np.asarray(lam),
        _bounds_array(model, cfg), psi0,
    )
    if not ok:
        raise KrotovError("non-finite pulse update; increase lambda")
    return pulse.with_samples(x_new), _infid(psiG, psi_new[-1])


def optimize(
    model: ControlledModel, guess: ControlPulse, cfg: KrotovConfig
) -> OptimizationRecord:
    """Iterate Krotov sweeps until the target, the iteration cap, or a stall."""
    _check_pulse(model, guess)
    grid = guess.grid
    eng = _engine(model, grid, cfg.backend)
    psi0, psiG = (s.amplitudes for s in model.boundary_states())
    lam = np.array(cfg.lambdas if cfg.lambdas is not None else default_lambdas(guess), dtype=float)
    if lam.shape[0] != guess.num_controls:
        raise KrotovError("one lambda per control is required")
    shape = update_shape(cfg.shape, grid)
    bounds = _bounds_array(model, cfg)

    x = np.ascontiguousarray(guess.samples, dtype=np.float64)
    cache = eng.prepare(x)
    psi = eng.forward(cache, psi0)
    trace = [_infid(psiG, psi[-1])]
    doublings = 0
    reason = "max_iterations"
    if trace[0] <= cfg.target_infidelity:
        reason = "target"
    n = 0
    while reason != "target" and n < cfg.max_iterations:
        chi = eng.backward(cache, _overlap_with(psiG, psi[-1]) * psiG)
        while True:
            ok, x_new, psi_new, cache_new = eng.sweep(x, cache, chi, shape, 1.0 / lam, bounds, psi0)
            if ok:
                I_new = _infid(psiG, psi_new[-1])
                if I_new <= trace[-1] + RETRY_TOL:
                    break
            doublings += 1
            if doublings > cfg.max_doublings:
                raise KrotovError(f"no monotonic step after {cfg.max_doublings} lambda doublings")
            lam = 2.0 * lam
            log.debug("iteration %d: lambda doubled to %s", n + 1, lam)
        x, psi, cache = x_new, psi_new, cache_new
        trace.append(I_new)
        n += 1
        if I_new <= cfg.target_infidelity:
            reason = "target"
        elif n >= cfg.stall_window:
            old = trace[-1 - cfg.stall_window]
            if (old - I_new) <= cfg.stall_threshold * old:
                reason = "stalled"
                break
    return OptimizationRecord(
        infidelity_trace=np.asarray(trace),
        final_pulse=guess.with_samples(x),
        converged=reason == "target",
        iterations_used=n,
        stop_reason=reason,
        lambdas=tuple(float(v) for v in lam),
        doublings=doublings,
    )


def pulse_infidelity(model: ControlledModel, pulse: ControlPulse, backend: str = "auto") -> float:
    """Infidelity reached by ``pulse`` from the model's initial state."""
    eng = _engine(model, pulse.grid, backend)
    psi0, psiG = (s.amplitudes for s in model.boundary_states())
    psi = eng.forward(eng.prepare(np.ascontiguousarray(pulse.samples, dtype=np.float64)), psi0)
    return infidelity(QuantumState(psi[-1]), QuantumState(psiG))


def forward_trajectory(model: ControlledModel, pulse: ControlPulse, backend: str = "auto") -> np.ndarray:
    """Node states psi(t_j), shape (M+1, dim)."""
    eng = _engine(model, pulse.grid, backend)
    psi0 = model.boundary_states()[0].amplitudes
    return eng.forward(eng.prepare(np.ascontiguousarray(pulse.samples, dtype=np.float64)), psi0)


def pulse_gradient(model: ControlledModel, pulse: ControlPulse, backend: str = "auto") -> np.ndarray:
    """Im<chi_j|dH/dx_k|psi_j> for every control k and step j, shape (K, M)."""
    eng = _engine(model, pulse.grid, backend)
    psi0, psiG = (s.amplitudes for s in model.boundary_states())
    x = np.ascontiguousarray(pulse.samples, dtype=np.float64)
    cache = eng.prepare(x)
    psi = eng.forward(cache, psi0)
    chi = eng.backward(cache, _overlap_with(psiG, psi[-1]) * psiG)
    return eng.gradient(x, cache, chi, psi)


def gradient_check(
    model: ControlledModel,
    pulse: ControlPulse,
    node: int,
    control: int,
    eps: float = 1e-6,
    backend: str = "auto",
) -> tuple[float, float]:
    """Compare the update direction at (node, control) with finite differences.

    Returns (analytic, numeric) where numeric = -(I(x+eps) - I(x-eps)) / (2 eps) / (2 dt);
    the 1/(2 dt) converts the derivative with respect to one node value into the
    matrix-element normalization used by the update.
    """
    _check_pulse(model, pulse)
    grid = pulse.grid
    if not 0 <= node < grid.steps:
        raise IndexError(f"node {node} outside 0..{grid.steps - 1}")
    analytic = float(pulse_gradient(model, pulse, backend)[control, node])

    def shifted(delta: float) -> float:
        s = np.array(pulse.samples)
        s[control, node] += delta
        return pulse_infidelity(model, pulse.with_samples(s), backend)

    numeric = -(shifted(eps) - shifted(-eps)) / (2.0 * eps) / (2.0 * grid.dt)
    return analytic, float(numeric)
