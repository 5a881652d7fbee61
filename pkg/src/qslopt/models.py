"""Controlled systems: the Landau-Zener two-level model and the Heisenberg
spin chain restricted to its single-excitation sector.

Both models expose the same surface used by the optimizer:

* ``control_names`` and ``dim``
* ``hamiltonian(x)`` / ``control_derivatives(x)`` for a vector of control values
* ``boundary_states()`` -> (initial, target)
* ``guess_pulse(grid)``
* ``kernel_spec()`` -> (kind, params) for the compiled propagation path, or None
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .core import (
    ControlPulse,
    HermitianOperator,
    QuantumState,
    TimeGrid,
    basis_state,
    ground_state,
)

__all__ = [
    "ControlledModel",
    "LZModel",
    "LZGuessParams",
    "SpinChainModel",
    "LinearControlModel",
    "lz_hamiltonian",
    "lz_guess_params",
    "lz_guess_pulse",
    "chain_hamiltonian",
    "chain_guess_pulse",
    "model_boundary_states",
]

# c(t) added to every diagonal entry; physically a global phase
EnergyShift = Callable[[np.ndarray], np.ndarray]


class ControlledModel:
    """Interface shared by all models; subclasses fill in the physics."""

    control_names: tuple[str, ...] = ()
    energy_shift: EnergyShift | None = None

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def hamiltonian(self, x: Sequence[float]) -> HermitianOperator:
        raise NotImplementedError

    def control_derivatives(self, x: Sequence[float]) -> list[HermitianOperator]:
        raise NotImplementedError

    def boundary_states(self) -> tuple[QuantumState, QuantumState]:
        raise NotImplementedError

    def guess_pulse(self, grid: TimeGrid) -> ControlPulse:
        raise NotImplementedError

    def kernel_spec(self) -> tuple[int, np.ndarray] | None:
        return None

    def default_bounds(self) -> np.ndarray:
        k = len(self.control_names)
        return np.tile([-np.inf, np.inf], (k, 1))

    def shift_on(self, grid: TimeGrid) -> np.ndarray:
        if self.energy_shift is None:
            return np.zeros(grid.steps + 1)
        return np.asarray(self.energy_shift(grid.times), dtype=np.float64)

    def hamiltonian_at_node(self, pulse: ControlPulse, j: int) -> HermitianOperator:
        H = self.hamiltonian(pulse.samples[:, j])
        if self.energy_shift is not None:
            H = H.shifted(float(self.shift_on(pulse.grid)[j]))
        return H


# ---------------------------------------------------------------------------
# Landau-Zener


@dataclass(frozen=True)
class LZModel(ControlledModel):
    """H(Gamma) = [[Gamma, omega], [omega, -Gamma]], swept from gamma0 to -gamma0."""

    omega: float = 1.0
    gamma0: float = -500.0
    energy_shift: EnergyShift | None = field(default=None, compare=False)

    control_names = ("gamma",)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.omega) and self.omega > 0):
            raise ValueError(f"omega must be positive, got {self.omega!r}")
        if not (np.isfinite(self.gamma0) and self.gamma0 < 0):
            raise ValueError(f"gamma0 must be negative, got {self.gamma0!r}")

    @property
    def dim(self) -> int:
        return 2

    @property
    def gamma_final(self) -> float:
        return -self.gamma0

    def gap(self, gamma: float | np.ndarray) -> float | np.ndarray:
        return 2.0 * np.sqrt(self.omega**2 + np.asarray(gamma) ** 2)

    def hamiltonian(self, x: Sequence[float]) -> HermitianOperator:
        return lz_hamiltonian(self, float(np.ravel(x)[0]))

    def control_derivatives(self, x: Sequence[float]) -> list[HermitianOperator]:
        return [HermitianOperator(np.diag([1.0, -1.0]))]

    def boundary_states(self) -> tuple[QuantumState, QuantumState]:
        return (
            ground_state(lz_hamiltonian(self, self.gamma0)),
            ground_state(lz_hamiltonian(self, self.gamma_final)),
        )

    def guess_pulse(self, grid: TimeGrid) -> ControlPulse:
        return lz_guess_pulse(self, grid)

    def kernel_spec(self) -> tuple[int, np.ndarray]:
        return _kernels.KIND_LZ, np.array([self.omega])


@dataclass(frozen=True)
class LZGuessParams:
    """Rate of the locally adiabatic sweep dGamma/dt = rate * G(Gamma)^2."""

    omega: float
    gamma0: float
    total_time: float
    rate: float

    def gap(self, gamma: float | np.ndarray) -> float | np.ndarray:
        return 2.0 * np.sqrt(self.omega**2 + np.asarray(gamma) ** 2)


def lz_hamiltonian(model: LZModel, gamma: float) -> HermitianOperator:
    if not np.isfinite(gamma):
        raise ValueError("control value must be finite")
    w = model.omega
    return HermitianOperator(np.array([[gamma, w], [w, -gamma]], dtype=np.complex128))


def lz_guess_params(model: LZModel, total_time: float) -> LZGuessParams:
    w = model.omega
    rate = (np.arctan(model.gamma_final / w) - np.arctan(model.gamma0 / w)) / (4.0 * total_time * w)
    return LZGuessParams(w, model.gamma0, total_time, float(rate))


def lz_guess_pulse(model: LZModel, grid: TimeGrid) -> ControlPulse:
    """Closed-form solution of dGamma/dt = rate * G(Gamma)^2 through Gamma(0) = gamma0."""
    p = lz_guess_params(model, grid.total_time)
    w = model.omega
    theta = np.arctan(model.gamma0 / w) + 4.0 * p.rate * w * grid.times
    g = w * np.tan(theta)
    # tan() round-off at the ends; the boundary values are exact by construction
    g[0] = model.gamma0
    g[-1] = model.gamma_final
    return ControlPulse(LZModel.control_names, g[None, :], grid)


# ---------------------------------------------------------------------------
# Heisenberg spin chain, single-excitation sector


@dataclass(frozen=True)
class SpinChainModel(ControlledModel):
    """Chain of ``length`` spins with a movable parabolic trap.

    Working basis: |m> = excitation (spin up) on site m, m = 0..N-1. Controls are
    the trap strength ``C`` (units of J) and the trap centre ``d`` (sites).
    ``trap_strength`` is the constant C0 of the guess pulse.
    """

    length: int = 9
    coupling: float = 1.0
    trap_strength: float = 2.0
    energy_shift: EnergyShift | None = field(default=None, compare=False)

    control_names = ("C", "d")

    def __post_init__(self) -> None:
        if int(self.length) != self.length or self.length < 3:
            raise ValueError(f"chain length must be an integer >= 3, got {self.length!r}")
        if not (np.isfinite(self.coupling) and self.coupling > 0):
            raise ValueError(f"coupling J must be positive, got {self.coupling!r}")
        if not (np.isfinite(self.trap_strength) and self.trap_strength > 0):
            raise ValueError(f"trap strength C0 must be positive, got {self.trap_strength!r}")

    @property
    def dim(self) -> int:
        return int(self.length)

    def bond_counts(self) -> np.ndarray:
        z = np.full(self.dim, 2.0)
        z[0] = z[-1] = 1.0
        return z

    def hamiltonian(self, x: Sequence[float]) -> HermitianOperator:
        C, d = (float(v) for v in np.ravel(x)[:2])
        return chain_hamiltonian(self, C, d)

    def control_derivatives(self, x: Sequence[float]) -> list[HermitianOperator]:
        C, d = (float(v) for v in np.ravel(x)[:2])
        m = np.arange(self.dim)
        return [
            HermitianOperator(np.diag((m - d) ** 2)),
            HermitianOperator(np.diag(-2.0 * C * (m - d))),
        ]

    def boundary_states(self) -> tuple[QuantumState, QuantumState]:
        return basis_state(self.dim, 0), basis_state(self.dim, self.dim - 1)

    def guess_pulse(self, grid: TimeGrid) -> ControlPulse:
        return chain_guess_pulse(self, grid, self.trap_strength)

    def kernel_spec(self) -> tuple[int, np.ndarray]:
        return _kernels.KIND_CHAIN, np.array([self.coupling])


def chain_hamiltonian(model: SpinChainModel, C: float, d: float) -> HermitianOperator:
    """Single-excitation projection with all site-independent terms dropped.

    Off-diagonal <m+1|H|m> = -J; diagonal C (m - d)^2 + J z_m where z_m is the
    number of bonds at site m. C may take either sign (an inverted trap).
    """
    if not (np.isfinite(C) and np.isfinite(d)):
        raise ValueError("control values must be finite")
    n = model.dim
    J = model.coupling
    m = np.arange(n)
    H = np.diag(C * (m - d) ** 2 + J * model.bond_counts()).astype(np.complex128)
    idx = np.arange(n - 1)
    H[idx, idx + 1] = -J
    H[idx + 1, idx] = -J
    return HermitianOperator(H)


def chain_guess_pulse(model: SpinChainModel, grid: TimeGrid, C0: float | None = None) -> ControlPulse:
    """Constant trap C0 whose centre moves linearly from site 0 to site N-1."""
    C0 = model.trap_strength if C0 is None else float(C0)
    if not C0 > 0:
        raise ValueError(f"C0 must be positive, got {C0!r}")
    t = grid.times
    d = t * (model.dim - 1) / grid.total_time
    d[-1] = model.dim - 1
    return ControlPulse(SpinChainModel.control_names, np.vstack([np.full_like(t, C0), d]), grid)


def model_boundary_states(model: ControlledModel) -> tuple[QuantumState, QuantumState]:
    return model.boundary_states()


# ---------------------------------------------------------------------------
# Generic dense model


class LinearControlModel(ControlledModel):
    """H(x) = H0 + sum_k x_k H_k with explicit boundary states and guess values.

    Runs on the dense reference path; mostly useful for small test systems.
    """

    def __init__(
        self,
        drift: np.ndarray,
        controls: Sequence[np.ndarray],
        initial: QuantumState,
        target: QuantumState,
        guess: Sequence[float] | None = None,
        names: Sequence[str] | None = None,
    ) -> None:
        self.drift = HermitianOperator(drift)
        self.controls = [HermitianOperator(h) for h in controls]
        self.initial = initial
        self.target = target
        k = len(self.controls)
        self.control_names = tuple(names) if names is not None else tuple(f"u{i}" for i in range(k))
        self.guess = np.zeros(k) if guess is None else np.asarray(guess, dtype=float)

    @property
    def dim(self) -> int:
        return self.drift.dim

    def hamiltonian(self, x: Sequence[float]) -> HermitianOperator:
        H = self.drift.matrix.copy()
        for xk, Hk in zip(np.ravel(x), self.controls):
            H = H + xk * Hk.matrix
        return HermitianOperator(H)

    def control_derivatives(self, x: Sequence[float]) -> list[HermitianOperator]:
        return list(self.controls)

    def boundary_states(self) -> tuple[QuantumState, QuantumState]:
        return self.initial, self.target

    def guess_pulse(self, grid: TimeGrid) -> ControlPulse:
        samples = np.repeat(self.guess[:, None], grid.steps + 1, axis=1)
        return ControlPulse(self.control_names, samples, grid)
