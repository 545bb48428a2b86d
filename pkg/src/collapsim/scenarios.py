"""Measurement scenarios: Stern-Gerlach, Bell-CHSH and GHZ harnesses.

A scenario fixes the branch structure (one branch per detector hit pattern),
the initial amplitudes from the textbook entangled state at the chosen
settings, and the execution engine.  The reduced ruin engine drives the
pumping game with modeled noise and is the fast statistics path; the full
and product engines run the actual nonlinear detector dynamics per trial at
reduced trial counts for consistency checks.

Hidden parameters are detector initial states, so changing a setting must
change them: every per-trial stream is seeded with a tag derived from the
scenario kind, engine and exact setting values.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .detector import (
    BiasedDoubleWell,
    DetectorModel,
    Harmonic,
    InitialStateSampler,
    InvertedOscillator,
    KickedOscillator,
    sample_initial_state,
)
from .hilbert import Grid, gaussian_packet
from .dynamics_full import (
    BranchLabel,
    DetectorSpace,
    assemble_initial_state,
    detect_collapse,
    run_trajectory,
    _raw_weights,
)
from .dynamics_product import assemble_product_state, run_product_trajectory
from .ruin import NoiseSpec, run_batch, trial_seed_sequence

SCHEMA_VERSION = 1
FULL_ENGINE_MAX_JOINT_DIM = 256  # tensor blow-up cap: 2 x dim-16, or 1 x dim-256
TIMEOUT_RATE_LIMIT = 0.05


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


class TimeoutRateExceeded(RuntimeError):
    """More than the tolerated fraction of trials hit the step limit."""


def build_bell_amplitudes(a: float, b: float) -> np.ndarray:
    """Singlet amplitudes in the product basis of spin directions a, b.

    Branch order (++, +-, -+, --) with the Bloch half-angle convention, so
    |c|^2 = (sin^2((a-b)/2)/2, cos^2/2, cos^2/2, sin^2/2) and the physical
    correlator is E(a, b) = -cos(a - b).
    """
    half = 0.5 * (a - b)
    s, c = math.sin(half), math.cos(half)
    return np.array([-s, -c, c, -s], dtype=complex) / math.sqrt(2.0)


def build_ghz_amplitudes(settings: str) -> np.ndarray:
    """GHZ-state amplitudes for per-particle X/Y measurement settings.

    ``settings`` is a three-letter string like "XXX" or "XYY"; branch order
    is lexicographic in outcomes (+++, ++-, ..., ---).  For an even number
    of Y settings only outcome triples with the matching sign product are
    populated.
    """
    if len(settings) != 3 or any(ch not in "XY" for ch in settings):
        raise ConfigError(f"GHZ settings must be three of X/Y, got {settings!r}")
    mu = np.prod([1.0 if ch == "X" else -1.0j for ch in settings])
    amps = np.empty(8, dtype=complex)
    for idx in range(8):
        signs = [1 - 2 * ((idx >> (2 - i)) & 1) for i in range(3)]
        prod = signs[0] * signs[1] * signs[2]
        amps[idx] = (1.0 + prod * mu) / 4.0
    return amps


def _branch_signs(kind: str, n_particles: int) -> np.ndarray:
    """Outcome signs per particle for each branch (hit pattern -> +-1)."""
    k = 2 ** n_particles
    signs = np.empty((k, n_particles), dtype=np.int64)
    for idx in range(k):
        for i in range(n_particles):
            signs[idx, i] = 1 - 2 * ((idx >> (n_particles - 1 - i)) & 1)
    return signs


def _hit_pattern(idx: int, n_particles: int) -> tuple[bool, ...]:
    """Detectors are (particle, port) pairs; + fires the up port."""
    pattern = []
    for i in range(n_particles):
        up = ((idx >> (n_particles - 1 - i)) & 1) == 0
        pattern.extend([up, not up])
    return tuple(pattern)


@dataclass
class DetectorConfig:
    """Detector model and sampling parameters for the dynamical engines."""

    n_points: int = 48
    x_min: float = -12.0
    x_max: float = 12.0
    potential: str = "double-well"
    barrier: float = 1.5
    tilt: float = 0.35
    half_width: float = 3.0
    curvature: float = 1.0
    quartic: float = 0.02
    kick_strength: float = 1.5
    period: float = 1.0
    omega: float = 1.0
    mass: float = 1.0
    packet_x0: float = 3.0
    packet_p0: float = 0.0
    packet_sigma: float = 0.7
    jitter_x: float = 0.05
    jitter_p: float = 0.05
    hit_kick: float = -1.5
    # real detectors are never identical; detector d gets
    # hit_kick * (1 + kick_spread * d^2), which breaks the pumping symmetry
    # of homogeneous setups (a perfectly fair game collapses only
    # diffusively; the quadratic law keeps Bell's complementary detector
    # pairs from having equal kick sums)
    kick_spread: float = 0.25

    def build_model(self) -> DetectorModel:
        grid = Grid(self.n_points, self.x_min, self.x_max)
        if self.potential == "double-well":
            pot = BiasedDoubleWell(self.barrier, self.tilt, self.half_width)
        elif self.potential == "inverted-oscillator":
            pot = InvertedOscillator(self.curvature, self.quartic)
        elif self.potential == "kicked-oscillator":
            pot = KickedOscillator(self.kick_strength, self.period, self.omega)
        elif self.potential == "harmonic":
            pot = Harmonic(self.omega)
        else:
            raise ConfigError(f"unknown potential {self.potential!r}")
        return DetectorModel(grid, pot, self.mass)


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one scenario run."""

    kind: str
    engine: str = "ruin"
    trials: int = 1000
    master_seed: int = 0
    zeta: float = 1.0
    dt: float = 0.02
    max_steps: int = 200_000
    epsilon: float = 1e-6
    amplitudes: Optional[np.ndarray] = None          # stern-gerlach
    a: Optional[float] = None                        # bell settings
    b: Optional[float] = None
    a_prime: Optional[float] = None
    b_prime: Optional[float] = None
    ghz_settings: Optional[list[str]] = None         # e.g. ["XXX", "XYY"]
    sg_layout: str = "one-hot"                       # or "threshold" (K=2, 1 detector)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.kind not in ("stern-gerlach", "bell", "ghz"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.engine not in ("ruin", "full", "product"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.trials < 1:
            raise ConfigError("trials must be positive")
        if self.sg_layout not in ("one-hot", "threshold"):
            raise ConfigError(f"unknown sg_layout {self.sg_layout!r}")
        if self.kind == "stern-gerlach":
            if self.amplitudes is None:
                raise ConfigError("stern-gerlach needs amplitudes")
            self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
            norm = float(np.sum(np.abs(self.amplitudes) ** 2))
            if abs(norm - 1.0) > 1e-9:
                raise ConfigError("amplitudes not normalized")
            if self.sg_layout == "threshold" and len(self.amplitudes) != 2:
                raise ConfigError("threshold layout is a binary fire/quiet detector")
        if self.kind == "bell" and (self.a is None or self.b is None):
            raise ConfigError("bell needs settings a and b (radians)")
        if self.kind == "bell" and (self.a_prime is None) != (self.b_prime is None):
            raise ConfigError("bell CHSH needs both a_prime and b_prime")
        if self.kind == "ghz":
            if not self.ghz_settings:
                raise ConfigError("ghz needs a list of three-letter settings")
            for s in self.ghz_settings:
                build_ghz_amplitudes(s)  # validates


def _setting_runs(config: ScenarioConfig) -> list[tuple[str, dict, np.ndarray, int]]:
    """(label, setting values, amplitudes, n_particles) for each sub-run."""
    if config.kind == "stern-gerlach":
        return [("outcomes", {}, config.amplitudes, 0)]
    if config.kind == "bell":
        pairs = [("a,b", config.a, config.b)]
        if config.a_prime is not None:
            pairs = [("a,b", config.a, config.b),
                     ("a,b'", config.a, config.b_prime),
                     ("a',b", config.a_prime, config.b),
                     ("a',b'", config.a_prime, config.b_prime)]
        return [(label, {"left": sa, "right": sb}, build_bell_amplitudes(sa, sb), 2)
                for label, sa, sb in pairs]
    return [(s, {"axes": s}, build_ghz_amplitudes(s), 3)
            for s in config.ghz_settings]


def _stream_tag(config: ScenarioConfig, label: str, setting: dict) -> int:
    """Distinct sub-seed tag per (kind, engine, setting): hidden parameters
    are detector states, so different settings get different streams."""
    parts = [config.kind, config.engine, label]
    parts += [f"{k}={v!r}" for k, v in sorted(setting.items())]
    digest = hashlib.sha256("|".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class SettingResult:
    """Winner statistics of one setting of a scenario."""

    label: str
    setting: dict
    amplitudes: np.ndarray
    trials: int
    counts: np.ndarray
    frequencies: np.ndarray
    timeouts: int
    correlator: Optional[float]
    correlator_sigma: Optional[float]
    winners: np.ndarray
    steps: np.ndarray
    seeds: np.ndarray
    stream_tag: int
    max_sum_error: float = 0.0
    revival_violations: int = 0


@dataclass
class CorrelationReport:
    """Scenario outcome: per-setting frequencies, correlators, CHSH."""

    kind: str
    engine: str
    master_seed: int
    results: list[SettingResult]
    chsh: Optional[float] = None
    chsh_sigma: Optional[float] = None

    def result_for(self, label: str) -> SettingResult:
        for r in self.results:
            if r.label == label:
                return r
        raise KeyError(f"no setting {label!r} in report")


def _correlator(winners: np.ndarray, signs: np.ndarray) -> tuple[float, float]:
    """Monte Carlo product correlator with its standard error."""
    prods = np.prod(signs[winners[winners >= 0]], axis=1)
    n = len(prods)
    if n == 0:
        return 0.0, 1.0
    e = float(prods.mean())
    sigma = float(np.sqrt(max(1.0 - e * e, 0.0) / n))
    return e, sigma


def _ruin_chunk(args):
    w0, noise, n, master_seed, zeta, dt, max_steps, epsilon, tag, offset = args
    res = run_batch(w0, noise, n, master_seed, zeta=zeta, dt=dt,
                    max_steps=max_steps, epsilon=epsilon, stream_tag=tag,
                    trial_offset=offset)
    return res.winners, res.steps, res.seeds, res.max_sum_error, res.revival_violations


def _run_setting_ruin(config: ScenarioConfig, amps: np.ndarray, tag: int,
                      threads: int = 1):
    w0 = np.abs(amps) ** 2
    w0 = w0 / w0.sum()
    if threads <= 1 or config.trials < 2 * threads:
        res = run_batch(w0, config.noise, config.trials, config.master_seed,
                        zeta=config.zeta, dt=config.dt, max_steps=config.max_steps,
                        epsilon=config.epsilon, stream_tag=tag)
        return (res.winners, res.steps, res.seeds, res.max_sum_error,
                res.revival_violations)
    # deterministic partition by absolute trial index: output is identical
    # to a single-worker run
    import multiprocessing
    bounds = np.linspace(0, config.trials, threads + 1).astype(int)
    jobs = [(w0, config.noise, int(b - a), config.master_seed, config.zeta,
             config.dt, config.max_steps, config.epsilon, tag, int(a))
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with multiprocessing.Pool(threads) as pool:
        parts = pool.map(_ruin_chunk, jobs)
    winners = np.concatenate([p[0] for p in parts])
    steps = np.concatenate([p[1] for p in parts])
    seeds = np.concatenate([p[2] for p in parts])
    sum_error = max(p[3] for p in parts)
    violations = sum(p[4] for p in parts)
    return winners, steps, seeds, sum_error, violations


def _dynamical_chunk(args):
    config, amps, tag, n_particles, t_start, t_stop = args
    return _run_setting_dynamical(config, amps, tag, n_particles,
                                  t_range=(t_start, t_stop))


def _merge_parts(parts):
    winners = np.concatenate([p[0] for p in parts])
    steps = np.concatenate([p[1] for p in parts])
    seeds = np.concatenate([p[2] for p in parts])
    sum_error = max(p[3] for p in parts)
    violations = sum(p[4] for p in parts)
    return winners, steps, seeds, sum_error, violations


def _run_setting_dynamical(config: ScenarioConfig, amps: np.ndarray, tag: int,
                           n_particles: int, t_range: tuple[int, int] | None = None):
    k = len(amps)
    if n_particles:
        n_detectors = 2 * n_particles
        labels = [BranchLabel(i, _hit_pattern(i, n_particles)) for i in range(k)]
    elif config.sg_layout == "threshold":
        # binary fire/quiet measurement on a single detector
        n_detectors = 1
        labels = [BranchLabel(0, (True,)), BranchLabel(1, (False,))]
    else:
        n_detectors = k
        labels = [BranchLabel(i, tuple(j == i for j in range(k))) for i in range(k)]
    det = config.detector
    models = [det.build_model() for _ in range(n_detectors)]
    if config.engine == "full":
        joint = det.n_points ** n_detectors
        if joint > FULL_ENGINE_MAX_JOINT_DIM:
            raise ConfigError(
                f"full engine is capped at joint dimension {FULL_ENGINE_MAX_JOINT_DIM} "
                f"(requested {det.n_points}^{n_detectors}); use the product engine")
        space = DetectorSpace(models)
    t_start, t_stop = t_range if t_range is not None else (0, config.trials)
    n = t_stop - t_start
    winners = np.full(n, -1, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    seeds = np.zeros(n, dtype=np.uint64)
    sum_error = 0.0
    violations = 0
    for i, t in enumerate(range(t_start, t_stop)):
        ss = trial_seed_sequence(config.master_seed, tag, t)
        seeds[i] = ss.generate_state(1, np.uint64)[0]
        rng = np.random.Generator(np.random.PCG64(ss))
        branch_states = _sample_branch_states(labels, models, det, rng)
        if config.engine == "product":
            state = assemble_product_state(amps, labels, branch_states, models,
                                           config.zeta)
            final, rec = run_product_trajectory(state, config.dt, config.max_steps,
                                                epsilon=config.epsilon,
                                                stop_on_collapse=True)
            w = rec.weights[-1]
        else:
            state = assemble_initial_state(amps, labels, branch_states, space,
                                           config.zeta)
            final, rec = run_trajectory(state, config.dt, config.max_steps,
                                        epsilon=config.epsilon,
                                        stop_on_collapse=True)
            w = _raw_weights(final)
        win = detect_collapse(w, config.epsilon)
        if win is not None:
            winners[i] = win
        steps[i] = len(rec.times) - 1
        sum_error = max(sum_error, rec.max_conservation_error)
        if np.any(rec.live[1:] & ~rec.live[:-1]):
            violations += 1
    return winners, steps, seeds, sum_error, violations


def _sample_branch_states(labels: Sequence[BranchLabel], models: Sequence[DetectorModel],
                          det: DetectorConfig, rng: np.random.Generator):
    """One apparatus state per detector; hit branches add the momentum kick.

    The apparatus jitter is the hidden parameter: all branches share the
    same sampled centers, differing only by the deterministic kick on hit
    detectors.
    """
    base = []
    for d, model in enumerate(models):
        kick = det.hit_kick * (1.0 + det.kick_spread * d * d)
        for _ in range(100):
            x0 = det.packet_x0 + det.jitter_x * rng.standard_normal()
            p0 = det.packet_p0 + det.jitter_p * rng.standard_normal()
            quiet = gaussian_packet(model.grid, x0, p0, det.packet_sigma)
            hit = gaussian_packet(model.grid, x0, p0 + kick, det.packet_sigma)
            edge = max(abs(quiet[0]), abs(quiet[-1]), abs(hit[0]), abs(hit[-1]))
            if edge <= 1e-8:
                base.append((quiet, hit))
                break
        else:
            raise RuntimeError("packet sampling kept escaping the grid")
    out = []
    for lab in labels:
        states = [base[d][1] if lab.hit_pattern[d] else base[d][0]
                  for d in range(len(models))]
        out.append(states)
    return out


def run_scenario(config: ScenarioConfig, threads: int = 1) -> CorrelationReport:
    """Execute every setting of the scenario and assemble statistics.

    ``threads`` > 1 fans trials out over a process pool; the partition is by
    absolute trial index, so the report is identical to a single-worker run.
    """
    results = []
    for label, setting, amps, n_particles in _setting_runs(config):
        tag = _stream_tag(config, label, setting)
        if config.engine == "ruin":
            winners, steps, seeds, sum_err, violations = \
                _run_setting_ruin(config, amps, tag, threads)
        elif threads > 1 and config.trials >= 2 * threads:
            import multiprocessing
            bounds = np.linspace(0, config.trials, threads + 1).astype(int)
            jobs = [(config, amps, tag, n_particles, int(a), int(b))
                    for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            with multiprocessing.Pool(threads) as pool:
                parts = pool.map(_dynamical_chunk, jobs)
            winners, steps, seeds, sum_err, violations = _merge_parts(parts)
        else:
            winners, steps, seeds, sum_err, violations = \
                _run_setting_dynamical(config, amps, tag, n_particles)
        k = len(amps)
        counts = np.bincount(winners[winners >= 0], minlength=k)[:k]
        timeouts = int((winners < 0).sum())
        if timeouts > TIMEOUT_RATE_LIMIT * config.trials:
            raise TimeoutRateExceeded(
                f"{timeouts}/{config.trials} trials timed out in setting {label!r}")
        corr = corr_sigma = None
        if n_particles:
            corr, corr_sigma = _correlator(winners, _branch_signs(config.kind, n_particles))
        results.append(SettingResult(label, setting, amps, config.trials, counts,
                                     counts / config.trials, timeouts, corr,
                                     corr_sigma, winners, steps, seeds, tag,
                                     sum_err, violations))
    report = CorrelationReport(config.kind, config.engine, config.master_seed, results)
    if config.kind == "bell" and len(results) == 4:
        report.chsh, report.chsh_sigma = chsh_statistic(report)
    return report


def chsh_statistic(report: CorrelationReport) -> tuple[float, float]:
    """S = E(a,b) - E(a,b') + E(a',b) + E(a',b') with propagated sigma."""
    try:
        e_ab = report.result_for("a,b")
        e_ab2 = report.result_for("a,b'")
        e_a2b = report.result_for("a',b")
        e_a2b2 = report.result_for("a',b'")
    except KeyError as exc:
        raise ValueError(f"CHSH needs all four settings: {exc}") from exc
    s = e_ab.correlator - e_ab2.correlator + e_a2b.correlator + e_a2b2.correlator
    sigma = math.sqrt(sum(r.correlator_sigma ** 2
                          for r in (e_ab, e_ab2, e_a2b, e_a2b2)))
    return float(s), float(sigma)


_TOP_LEVEL_KEYS = {
    "schema_version", "kind", "engine", "trials", "master_seed", "zeta", "dt",
    "max_steps", "epsilon", "amplitudes", "settings", "noise", "detector",
    "sg_layout",
}
_NOISE_KEYS = {"kind", "sigma", "amplitude", "flip_rate"}
_SETTING_KEYS = {"a", "b", "a_prime", "b_prime", "ghz"}
_DETECTOR_KEYS = {f.name for f in DetectorConfig.__dataclass_fields__.values()}


def config_from_dict(data: dict) -> ScenarioConfig:
    """Parse and strictly validate a scenario document (unknown keys rejected)."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if "kind" not in data:
        raise ConfigError("config needs a scenario kind")
    kwargs: dict = {"kind": data["kind"]}
    for key in ("engine", "trials", "master_seed", "zeta", "dt", "max_steps",
                "epsilon", "sg_layout"):
        if key in data:
            kwargs[key] = data[key]
    if "amplitudes" in data:
        amps = [complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)
                for v in data["amplitudes"]]
        kwargs["amplitudes"] = np.array(amps)
    settings = data.get("settings", {})
    if settings:
        unknown = set(settings) - _SETTING_KEYS
        if unknown:
            raise ConfigError(f"unknown settings fields: {sorted(unknown)}")
        for key in ("a", "b", "a_prime", "b_prime"):
            if key in settings:
                kwargs[key] = float(settings[key])
        if "ghz" in settings:
            kwargs["ghz_settings"] = list(settings["ghz"])
    if "noise" in data:
        unknown = set(data["noise"]) - _NOISE_KEYS
        if unknown:
            raise ConfigError(f"unknown noise fields: {sorted(unknown)}")
        kwargs["noise"] = NoiseSpec(**data["noise"])
    if "detector" in data:
        unknown = set(data["detector"]) - _DETECTOR_KEYS
        if unknown:
            raise ConfigError(f"unknown detector fields: {sorted(unknown)}")
        kwargs["detector"] = DetectorConfig(**data["detector"])
    return ScenarioConfig(**kwargs)


def config_to_dict(config: ScenarioConfig) -> dict:
    """Canonical JSON-ready form of a config (inverse of config_from_dict)."""
    out: dict = {
        "schema_version": SCHEMA_VERSION,
        "kind": config.kind,
        "engine": config.engine,
        "trials": config.trials,
        "master_seed": config.master_seed,
        "zeta": config.zeta,
        "dt": config.dt,
        "max_steps": config.max_steps,
        "epsilon": config.epsilon,
        "sg_layout": config.sg_layout,
    }
    if config.amplitudes is not None:
        out["amplitudes"] = [[float(c.real), float(c.imag)] for c in config.amplitudes]
    settings = {}
    for key in ("a", "b", "a_prime", "b_prime"):
        value = getattr(config, key)
        if value is not None:
            settings[key] = float(value)
    if config.ghz_settings:
        settings["ghz"] = list(config.ghz_settings)
    if settings:
        out["settings"] = settings
    out["noise"] = {"kind": config.noise.kind, "sigma": config.noise.sigma,
                    "amplitude": config.noise.amplitude,
                    "flip_rate": config.noise.flip_rate}
    out["detector"] = asdict(config.detector)
    return out