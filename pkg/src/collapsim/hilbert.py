"""Finite-dimensional detector configuration space.

One detector (with its local environment) is reduced to a single effective
coordinate sampled on a uniform grid.  The grid points are treated as an
orthonormal basis, so states are plain complex vectors with unit Euclidean
norm and operators are dense complex matrices; traces are ordinary matrix
traces (uniform quadrature weights cancel in every ratio used here).

Units: hbar = 1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERMITICITY_TOL = 1e-12
MEAN_IMAG_TOL = 1e-10
TRACE_FLOOR = 1e-12


class VanishedBranch(Exception):
    """Raised when a branch block has (numerically) zero trace.

    A vanished branch is ruined in the gambler's-ruin sense and must be
    excluded from mean values and pumping sums rather than divided by.
    """


@dataclass(frozen=True)
class Grid:
    """Uniform coordinate grid for one detector coordinate."""

    n_points: int
    x_min: float
    x_max: float

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError(f"grid needs at least 2 points, got {self.n_points}")
        if not self.x_max > self.x_min:
            raise ValueError(f"empty grid range [{self.x_min}, {self.x_max}]")

    @property
    def spacing(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)


@dataclass
class Operator:
    """Dense complex operator with an optional hermiticity assertion."""

    matrix: np.ndarray
    hermitian: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"operator must be square, got shape {self.matrix.shape}")
        if self.hermitian:
            dev = hermiticity_defect(self.matrix)
            if dev > HERMITICITY_TOL:
                raise ValueError(f"matrix declared Hermitian but max |A - A^dag| = {dev:.3e}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class BlockMatrix:
    """Branch block R_kl on the detector configuration space.

    Off-diagonal blocks (k != l) are not Hermitian individually; the pairing
    R_kl = R_lk^dag is an invariant of the containing system state.
    """

    matrix: np.ndarray
    row_branch: int = 0
    col_branch: int = 0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"block must be square, got shape {self.matrix.shape}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def hermiticity_defect(matrix: np.ndarray) -> float:
    """Max-entry deviation of A from its conjugate transpose."""
    return float(np.max(np.abs(matrix - matrix.conj().T)))


def build_position_operator(grid: Grid) -> Operator:
    """Diagonal position operator with the grid coordinates on the diagonal."""
    return Operator(np.diag(grid.points.astype(complex)), hermitian=True)


def build_momentum_operator(grid: Grid, kind: str = "spectral") -> Operator:
    """Hermitian momentum operator p = -i d/dx on the (periodic) grid.

    kind="spectral" builds the Fourier form F^dag diag(k) F, exact for
    band-limited states; the unpaired Nyquist mode (even n) is zeroed so the
    operator stays traceless and drift-free.  kind="central" uses periodic
    central differences, accurate to O(spacing^2).
    """
    n = grid.n_points
    dx = grid.spacing
    if kind == "spectral":
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=dx)
        if n % 2 == 0:
            k[n // 2] = 0.0
        # p = F^dag diag(k) F with unitary DFT; row-wise FFT of diag(k) columns
        f = np.fft.fft(np.eye(n), axis=0) / np.sqrt(n)
        p = f.conj().T @ (k[:, None] * f)
    elif kind == "central":
        p = np.zeros((n, n), dtype=complex)
        idx = np.arange(n)
        p[idx, (idx + 1) % n] = -1j / (2.0 * dx)
        p[idx, (idx - 1) % n] = +1j / (2.0 * dx)
    else:
        raise ValueError(f"unknown momentum discretization {kind!r}")
    # symmetrize away roundoff so the hermiticity invariant is tight
    p = 0.5 * (p + p.conj().T)
    return Operator(p, hermitian=True)


def mean_value(block_kk: BlockMatrix, op: Operator, trace_floor: float = TRACE_FLOOR) -> float:
    """Branch mean value Tr(R_kk A) / Tr(R_kk).

    Scaling-invariant in the block.  Raises VanishedBranch when the block
    trace is at or below ``trace_floor`` (the branch is ruined and carries no
    mean values).
    """
    return _mean_value_raw(block_kk.matrix, op.matrix, trace_floor)


def _mean_value_raw(block: np.ndarray, op: np.ndarray, trace_floor: float = TRACE_FLOOR) -> float:
    tr = np.trace(block)
    if tr.real <= trace_floor:
        raise VanishedBranch(f"branch trace {tr.real:.3e} at or below floor {trace_floor:.3e}")
    if abs(tr.imag) > MEAN_IMAG_TOL * max(1.0, abs(tr.real)):
        raise ValueError(f"diagonal block trace has imaginary part {tr.imag:.3e}")
    val = np.trace(block @ op) / tr
    return float(val.real)


def anticommutator(op: Operator, block: BlockMatrix) -> BlockMatrix:
    """{A, R} = A R + R A, keeping the block's branch labels."""
    a, r = op.matrix, block.matrix
    if a.shape != r.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {r.shape}")
    return BlockMatrix(a @ r + r @ a, block.row_branch, block.col_branch)


def gaussian_packet(grid: Grid, x0: float, p0: float, sigma: float) -> np.ndarray:
    """Normalized minimum-uncertainty wavepacket on the grid."""
    x = grid.points
    psi = np.exp(-((x - x0) ** 2) / (4.0 * sigma**2) + 1j * p0 * x)
    psi /= np.linalg.norm(psi)
    return psi
