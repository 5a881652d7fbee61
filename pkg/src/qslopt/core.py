"""States, operators, time grids and exact piecewise-constant propagation.

Units: hbar = 1 throughout. Pulses are sampled on the M+1 grid nodes and held
constant on [t_j, t_{j+1}) at the value of node j; the value at the final
node never enters the dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt

ComplexArray = npt.NDArray[np.complex128]
FloatArray = npt.NDArray[np.float64]

NORM_TOL = 1e-10
HERMITIAN_TOL = 1e-12
DEGENERACY_TOL = 1e-10

__all__ = [
    "QuantumError",
    "DimensionError",
    "DegeneracyError",
    "QuantumState",
    "HermitianOperator",
    "TimeGrid",
    "ControlPulse",
    "basis_state",
    "evolve_step",
    "propagate",
    "overlap",
    "infidelity",
    "energy_stats",
    "ground_state",
]


class QuantumError(ValueError):
    """Invalid input to a quantum-core operation."""


class DimensionError(QuantumError):
    pass


class DegeneracyError(QuantumError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise QuantumError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class QuantumState:
    """Complex amplitude vector in a model's working basis.

    ``normalized=False`` marks a costate, whose norm may be below one.
    """

    amplitudes: ComplexArray
    normalized: bool = True

    def __post_init__(self) -> None:
        amps = np.array(self.amplitudes, dtype=np.complex128).ravel()
        if amps.size < 2:
            raise DimensionError("state dimension must be at least 2")
        _check_finite(amps, "state")
        if self.normalized and abs(np.linalg.norm(amps) - 1.0) > NORM_TOL:
            raise QuantumError(f"state is not normalized (norm={np.linalg.norm(amps)!r})")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_vector(cls, vec: Sequence[complex] | np.ndarray) -> "QuantumState":
        """Build a normalized state, rescaling ``vec`` to unit norm."""
        v = np.asarray(vec, dtype=np.complex128).ravel()
        nrm = np.linalg.norm(v)
        if nrm == 0.0 or not np.isfinite(nrm):
            raise QuantumError("cannot normalize a zero or non-finite vector")
        return cls(v / nrm)

    @property
    def dim(self) -> int:
        return int(self.amplitudes.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass(frozen=True)
class HermitianOperator:
    matrix: ComplexArray

    def __post_init__(self) -> None:
        mat = np.array(self.matrix, dtype=np.complex128)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"operator must be square, got shape {mat.shape}")
        _check_finite(mat, "operator")
        if np.max(np.abs(mat - mat.conj().T), initial=0.0) > HERMITIAN_TOL * max(1.0, np.max(np.abs(mat))):
            raise QuantumError("operator is not Hermitian")
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    def shifted(self, c: float) -> "HermitianOperator":
        """Return H + c * I."""
        return HermitianOperator(self.matrix + c * np.eye(self.dim))

    def eigh(self) -> tuple[FloatArray, ComplexArray]:
        return np.linalg.eigh(self.matrix)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j * T / M, j = 0..M."""

    total_time: float
    steps: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.total_time) and self.total_time > 0):
            raise ValueError(f"total_time must be positive, got {self.total_time!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def with_max_dt(cls, total_time: float, max_dt: float) -> "TimeGrid":
        return cls(total_time, max(1, int(np.ceil(total_time / max_dt - 1e-9))))

    @property
    def dt(self) -> float:
        return self.total_time / self.steps

    @property
    def times(self) -> FloatArray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class ControlPulse:
    """Named control functions sampled on the nodes of a TimeGrid."""

    names: tuple[str, ...]
    samples: FloatArray
    grid: TimeGrid = field(compare=False)

    def __post_init__(self) -> None:
        names = tuple(self.names)
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.shape != (len(names), self.grid.steps + 1):
            raise DimensionError(
                f"pulse shape {s.shape} does not match {len(names)} controls on "
                f"{self.grid.steps + 1} nodes"
            )
        _check_finite(s, "pulse")
        s.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "samples", s)

    @property
    def num_controls(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> FloatArray:
        return self.samples[self.names.index(name)]

    def with_samples(self, samples: np.ndarray) -> "ControlPulse":
        return ControlPulse(self.names, samples, self.grid)


def basis_state(dim: int, index: int) -> QuantumState:
    v = np.zeros(dim, dtype=np.complex128)
    v[index] = 1.0
    return QuantumState(v)


def _check_dims(a: int, b: int) -> None:
    if a != b:
        raise DimensionError(f"dimension mismatch: {a} != {b}")


def _step_matrix(H: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i H dt) for a Hermitian matrix."""
    if H.shape[0] == 2:
        # H = a0 I + a . sigma
        a0 = 0.5 * (H[0, 0] + H[1, 1]).real
        az = 0.5 * (H[0, 0] - H[1, 1]).real
        ax = H[0, 1].real
        ay = -H[0, 1].imag
        r = np.sqrt(ax * ax + ay * ay + az * az)
        c = np.cos(r * dt)
        # sin(r dt)/r, finite at r = 0
        s = dt * np.sinc(r * dt / np.pi)
        U = np.array(
            [[c - 1j * s * az, -1j * s * (ax - 1j * ay)],
             [-1j * s * (ax + 1j * ay), c + 1j * s * az]],
            dtype=np.complex128,
        )
        return np.exp(-1j * a0 * dt) * U
    w, v = np.linalg.eigh(H)
    return (v * np.exp(-1j * w * dt)) @ v.conj().T


def evolve_step(state: QuantumState, H: HermitianOperator, dt: float) -> QuantumState:
    """Apply exp(-i H dt) to ``state``."""
    _check_dims(state.dim, H.dim)
    if not (np.isfinite(dt) and dt > 0):
        raise QuantumError(f"dt must be positive, got {dt!r}")
    out = _step_matrix(H.matrix, dt) @ state.amplitudes
    return QuantumState(out, normalized=state.normalized)


def propagate(
    state0: QuantumState,
    hamiltonian_at: Callable[[int], HermitianOperator],
    grid: TimeGrid,
    direction: str = "forward",
    capture: str = "none",
) -> QuantumState | tuple[QuantumState, list[QuantumState]]:
    """Piecewise-constant propagation over ``grid``.

    ``hamiltonian_at(j)`` returns the Hamiltonian on [t_j, t_{j+1}).
    Forward maps psi(t_0) -> psi(t_M). Backward takes a state at t_M and applies
    the adjoint steps in reverse order. With ``capture="full"`` the M+1 node
    states are returned too, indexed by node.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    if capture not in ("none", "full"):
        raise ValueError(f"unknown capture mode {capture!r}")
    dt = grid.dt
    M = grid.steps
    vec = state0.amplitudes.copy()
    traj = [vec.copy()] if capture == "full" else None
    order = range(M) if direction == "forward" else range(M - 1, -1, -1)
    for j in order:
        H = hamiltonian_at(j)
        _check_dims(state0.dim, H.dim)
        U = _step_matrix(H.matrix, dt)
        vec = U @ vec if direction == "forward" else U.conj().T @ vec
        if traj is not None:
            traj.append(vec.copy())
    final = QuantumState(vec, normalized=state0.normalized)
    if traj is None:
        return final
    if direction == "backward":
        traj.reverse()
    return final, [QuantumState(v, normalized=state0.normalized) for v in traj]


def overlap(a: QuantumState, b: QuantumState) -> complex:
    """<a|b>."""
    _check_dims(a.dim, b.dim)
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def infidelity(final: QuantumState, goal: QuantumState) -> float:
    """1 - |<final|goal>|^2 for normalized states."""
    for s in (final, goal):
        if abs(s.norm() - 1.0) > NORM_TOL:
            raise QuantumError("infidelity requires normalized states")
    val = 1.0 - abs(overlap(final, goal)) ** 2
    return float(min(1.0, max(0.0, val)))


def energy_stats(H: HermitianOperator, phi: QuantumState) -> tuple[float, float]:
    """Mean energy and energy spread of ``H`` on ``phi``."""
    _check_dims(H.dim, phi.dim)
    v = phi.amplitudes
    Hv = H.matrix @ v
    mean = float(np.vdot(v, Hv).real)
    # centred form avoids cancellation under large shifts H + c I
    dv = Hv - mean * v
    var = float(np.vdot(dv, dv).real)
    return mean, float(np.sqrt(max(var, 0.0)))


def ground_state(H: HermitianOperator) -> QuantumState:
    """Lowest eigenvector, phase fixed so the first nonzero entry is real positive."""
    w, v = H.eigh()
    if w.shape[0] > 1 and w[1] - w[0] < DEGENERACY_TOL:
        raise DegeneracyError(f"ground state is degenerate (gap {w[1] - w[0]:.3e})")
    vec = v[:, 0]
    idx = int(np.argmax(np.abs(vec) > 1e-12))
    vec = vec * (abs(vec[idx]) / vec[idx])
    return QuantumState.from_vector(vec)
