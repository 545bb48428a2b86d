"""Metastable detector models and hidden-parameter sampling.

The uncontrollable microscopic initial state of each detector is the hidden
parameter of the theory: randomness enters only through initial-state
sampling, everything afterwards is strictly deterministic.  The default
production model is an inverted-oscillator top with quartic confinement,
which gives genuine sensitivity to initial conditions on a small grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .hilbert import (
    Grid,
    Operator,
    build_momentum_operator,
    build_position_operator,
    gaussian_packet,
    hermiticity_defect,
)

BOUNDARY_AMPLITUDE_TOL = 1e-8
MAX_SAMPLE_REJECTS = 100


class PacketEscapesGrid(Exception):
    """Sampler repeatedly produced packets with support at the grid boundary."""


@dataclass(frozen=True)
class Harmonic:
    """V(x) = m omega^2 x^2 / 2.  Stable reference well (validation only)."""

    omega: float = 1.0

    def values(self, x: np.ndarray, mass: float) -> np.ndarray:
        return 0.5 * mass * self.omega**2 * x**2


@dataclass(frozen=True)
class InvertedOscillator:
    """Unstable top V(x) = -m curvature^2 x^2 / 2 + quartic x^4.

    A packet near x = 0 diverges as exp(curvature * t); the quartic term
    keeps it on the grid.  quartic = 0 gives the pure unstable oscillator.
    """

    curvature: float = 1.0
    quartic: float = 0.02

    def values(self, x: np.ndarray, mass: float) -> np.ndarray:
        return -0.5 * mass * self.curvature**2 * x**2 + self.quartic * x**4


@dataclass(frozen=True)
class BiasedDoubleWell:
    """V(x) = barrier ((x/half_width)^2 - 1)^2 + tilt x, metastable upper well."""

    barrier: float = 1.0
    tilt: float = 0.1
    half_width: float = 2.0

    def values(self, x: np.ndarray, mass: float) -> np.ndarray:
        return self.barrier * ((x / self.half_width) ** 2 - 1.0) ** 2 + self.tilt * x


@dataclass(frozen=True)
class KickedOscillator:
    """Harmonic well with periodic cos-kicks, the standard route to chaos.

    The smooth part m omega^2 x^2 / 2 lives in the static Hamiltonian; the
    kick exp(-i kick_strength cos(x)) is applied by the linear propagator at
    every multiple of ``period``.
    """

    kick_strength: float = 1.5
    period: float = 1.0
    omega: float = 1.0

    def values(self, x: np.ndarray, mass: float) -> np.ndarray:
        return 0.5 * mass * self.omega**2 * x**2


Potential = Union[Harmonic, InvertedOscillator, BiasedDoubleWell, KickedOscillator]


@dataclass
class DetectorModel:
    """One detector reduced to a single effective coordinate."""

    grid: Grid
    potential: Potential = field(default_factory=InvertedOscillator)
    mass: float = 1.0
    momentum_kind: str = "spectral"

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return self.grid.n_points

    def position_operator(self) -> Operator:
        if "x" not in self._cache:
            self._cache["x"] = build_position_operator(self.grid)
        return self._cache["x"]

    def momentum_operator(self) -> Operator:
        if "p" not in self._cache:
            self._cache["p"] = build_momentum_operator(self.grid, self.momentum_kind)
        return self._cache["p"]

    def hamiltonian(self) -> Operator:
        if "h0" not in self._cache:
            self._cache["h0"] = build_hamiltonian(self)
        return self._cache["h0"]

    def _eigensystem(self):
        """Eigendecomposition of the smooth Hamiltonian, for exact propagators."""
        if "eig" not in self._cache:
            evals, evecs = np.linalg.eigh(self.hamiltonian().matrix)
            self._cache["eig"] = (evals, evecs)
        return self._cache["eig"]

    def propagator(self, dt: float) -> np.ndarray:
        """Exact unitary exp(-i H0 dt) of the smooth part (kicks excluded)."""
        key = ("u", float(dt))
        if key not in self._cache:
            evals, evecs = self._eigensystem()
            self._cache[key] = (evecs * np.exp(-1j * evals * dt)) @ evecs.conj().T
        return self._cache[key]

    def kick_unitary(self) -> np.ndarray | None:
        """Diagonal kick factor for kicked models, None otherwise."""
        if not isinstance(self.potential, KickedOscillator):
            return None
        if "kick" not in self._cache:
            x = self.grid.points
            self._cache["kick"] = np.exp(-1j * self.potential.kick_strength * np.cos(x))
        return self._cache["kick"]


def build_hamiltonian(model: DetectorModel) -> Operator:
    """H0 = p^2 / (2m) + V(x), Hermitian by symmetrized construction."""
    p = model.momentum_operator().matrix
    v = model.potential.values(model.grid.points, model.mass)
    h = (p @ p) / (2.0 * model.mass) + np.diag(v.astype(complex))
    h = 0.5 * (h + h.conj().T)
    assert hermiticity_defect(h) < 1e-12
    return Operator(h, hermitian=True)


@dataclass
class InitialStateSampler:
    """Gaussian wavepackets with randomized center, the hidden parameters.

    (mean_x, mean_p) is the nominal packet center; (spread_x, spread_p) are
    standard deviations of the sampled center across trials.  packet_sigma is
    the spatial width of each individual packet.
    """

    mean_x: float = 0.0
    mean_p: float = 0.0
    spread_x: float = 0.1
    spread_p: float = 0.1
    packet_sigma: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.spread_x <= 0 or self.spread_p <= 0:
            raise ValueError("center spreads must be positive")
        if self.packet_sigma <= 0:
            raise ValueError("packet width must be positive")
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def draw_center(self) -> tuple[float, float]:
        x0 = self.mean_x + self.spread_x * self._rng.standard_normal()
        p0 = self.mean_p + self.spread_p * self._rng.standard_normal()
        return float(x0), float(p0)


def sample_initial_state(sampler: InitialStateSampler, model: DetectorModel) -> np.ndarray:
    """Draw one normalized packet; reject and resample when it touches the boundary."""
    for _ in range(MAX_SAMPLE_REJECTS):
        x0, p0 = sampler.draw_center()
        psi = gaussian_packet(model.grid, x0, p0, sampler.packet_sigma)
        if max(abs(psi[0]), abs(psi[-1])) <= BOUNDARY_AMPLITUDE_TOL:
            return psi
    raise PacketEscapesGrid(
        f"{MAX_SAMPLE_REJECTS} consecutive samples reached boundary amplitude "
        f"> {BOUNDARY_AMPLITUDE_TOL}; sampler/grid mismatch"
    )


def propagate_linear(model: DetectorModel, state: np.ndarray, t0: float, duration: float) -> np.ndarray:
    """Evolve a state vector under H0 alone from t0 for ``duration``.

    Uses the exact eigendecomposition propagator; for kicked models the kick
    unitary is applied whenever a multiple of the kick period is crossed.
    """
    if duration == 0.0:
        return state.copy()
    kick = model.kick_unitary()
    if kick is None:
        return model.propagator(duration) @ state
    period = model.potential.period
    t_end = t0 + duration
    psi = state
    t = t0
    # kicks fire at times n*period in (t0, t_end]; t0 itself already fired
    n = int(np.floor(t0 / period + 1e-12)) + 1
    while n * period <= t_end + 1e-12:
        t_kick = n * period
        psi = model.propagator(t_kick - t) @ psi
        psi = kick * psi
        t = t_kick
        n += 1
    if t_end > t:
        psi = model.propagator(t_end - t) @ psi
    return psi


def lyapunov_probe(model: DetectorModel, state: np.ndarray, dt: float, steps: int,
                   separation: float = 1e-8) -> float:
    """Finite-time divergence exponent of mean-position trajectories.

    Evolves ``state`` and a copy displaced by ``separation`` in position under
    H0 alone and records d(t) = |delta <x>|.  The exponent is the slope of
    log(running max of d) over the last quarter of the window: the running
    max removes phase oscillations of stable wells (constant envelope, slope
    0) while tracking exponential divergence of unstable ones.  Zero
    separation returns 0 exactly.
    """
    if separation == 0.0:
        return 0.0
    x = model.grid.points
    p = model.momentum_operator().matrix
    # exact displacement by exp(-i p * separation)
    evals, evecs = np.linalg.eigh(p)
    shift = (evecs * np.exp(-1j * evals * separation)) @ evecs.conj().T
    psi_a = state.copy()
    psi_b = shift @ state
    dists = np.empty(steps + 1)
    t = 0.0
    for i in range(steps + 1):
        xa = float(np.real(np.vdot(psi_a, x * psi_a)))
        xb = float(np.real(np.vdot(psi_b, x * psi_b)))
        dists[i] = abs(xa - xb)
        if i < steps:
            psi_a = propagate_linear(model, psi_a, t, dt)
            psi_b = propagate_linear(model, psi_b, t, dt)
            t += dt
    if np.all(dists == 0.0):
        return 0.0
    envelope = np.maximum.accumulate(dists)
    tail = envelope[3 * (steps + 1) // 4:]
    times = dt * np.arange(steps + 1)[3 * (steps + 1) // 4:]
    good = tail > 0
    if good.sum() < 2:
        return 0.0
    slope = np.polyfit(times[good], np.log(tail[good]), 1)[0]
    return float(slope)


def default_detector_model(n_points: int = 64, x_range: float = 10.0,
                           curvature: float = 1.0, quartic: float = 0.02) -> DetectorModel:
    """Default metastable detector: inverted top with quartic confinement."""
    grid = Grid(n_points, -x_range, x_range)
    return DetectorModel(grid, InvertedOscillator(curvature, quartic))
