"""Reduced stochastic pumping game: gambler's ruin over branch weights.

The full detector dynamics enters only through the antisymmetric pumping
coefficients A_km(t), modeled here as external noise with the no-drift
(martingale) property.  Weights follow the Euler-Maruyama discretization of

    dw_k = zeta w_k sum_m w_m A_km dt

which preserves the total weight exactly (antisymmetry) and keeps each
single update a martingale (the increment is linear in the zero-mean noise).
Branches falling below the absorption threshold are ruined for good; the
last live branch is the measurement outcome, and for unbiased noise the
winner frequencies reproduce the initial weights (Born's rule).

Step capping: when any |dw_k| would exceed CAP * w_k, the interval is
re-simulated as two independent half-steps (recursively).  Re-simulating
with fresh finer increments keeps the update an exact martingale by the
tower property; reusing the same increment for both halves would bias the
game toward equalization, which corrupts Born statistics.  Replay noise is
recorded data, so there subdivision splits the same piecewise-constant
coefficients over the half-intervals instead.

Reproducibility: trial i draws from a dedicated stream seeded by
SeedSequence(entropy=[master_seed, stream_tag, i]).  Batched and one-at-a-
time execution consume the streams identically (buffered numpy generation
is stable under call splitting), so results never depend on batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._ruin_fast import HAVE_NUMBA, MAX_DEPTH, RESERVE_FACTOR, _run_rows

CAP = 0.1
DEFAULT_EPSILON = 1e-6
DEFAULT_SIGMA = 1.0
DEFAULT_DT = 0.02
DEFAULT_MAX_STEPS = 200_000
_MEMORY_BUDGET = 64_000_000  # bytes of noise buffer per block


class ReplayExhausted(Exception):
    """Replay noise ran past the end of the recorded trace."""


class SubdivisionOverflow(Exception):
    """Step capping recursed past MAX_DEPTH; the noise scale is pathological."""


def trial_seed_sequence(master_seed: int, stream_tag: int, trial: int) -> np.random.SeedSequence:
    """The documented splittable scheme: entropy = [master, tag, trial]."""
    return np.random.SeedSequence(entropy=[master_seed, stream_tag, trial])


def _upper_pairs(k: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(k, 1)


@dataclass
class NoiseSpec:
    """Declarative noise model description (picklable, used in configs).

    bias is an optional antisymmetric drift matrix added per unit time; it
    exists to construct deliberately unfair games in diagnostics and tests.
    """

    kind: str = "gaussian"
    sigma: float = DEFAULT_SIGMA
    amplitude: float = 1.0
    flip_rate: float = 1.0
    bias: np.ndarray | None = None
    trace_dts: np.ndarray | None = None
    trace_matrices: np.ndarray | None = None

    def build(self, n_branches: int, rng: np.random.Generator) -> "NoiseModel":
        if self.kind == "gaussian":
            return GaussianWhiteNoise(n_branches, self.sigma, rng, bias=self.bias)
        if self.kind == "telegraph":
            return TelegraphNoise(n_branches, self.amplitude, self.flip_rate, rng,
                                  bias=self.bias)
        if self.kind == "replay":
            if self.trace_dts is None or self.trace_matrices is None:
                raise ValueError("replay noise needs trace_dts and trace_matrices")
            return ReplayNoise(self.trace_dts, self.trace_matrices)
        raise ValueError(f"unknown noise kind {self.kind!r}")


class NoiseModel:
    """One trial's source of pumping-coefficient increments."""

    n_branches: int

    def sample(self, dt: float, live: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def _mask(self, a: np.ndarray, live: np.ndarray | None) -> np.ndarray:
        if live is not None and not live.all():
            a[~live, :] = 0.0
            a[:, ~live] = 0.0
        return a


class GaussianWhiteNoise(NoiseModel):
    """Independent white increments: entries scale as sigma sqrt(dt)."""

    def __init__(self, n_branches: int, sigma: float, rng: np.random.Generator,
                 bias: np.ndarray | None = None):
        self.n_branches = n_branches
        self.sigma = sigma
        self.rng = rng
        self.bias = None if bias is None else np.asarray(bias, float)
        self._iu = _upper_pairs(n_branches)

    def sample(self, dt: float, live: np.ndarray | None = None) -> np.ndarray:
        k = self.n_branches
        xi = self.rng.standard_normal(len(self._iu[0]))
        a = np.zeros((k, k))
        a[self._iu] = self.sigma * np.sqrt(dt) * xi
        a = a - a.T
        if self.bias is not None:
            a = a + self.bias * dt
        return self._mask(a, live)


class TelegraphNoise(NoiseModel):
    """Dichotomous entries +-amplitude flipping at the given Poisson rate.

    The increment over dt uses the value at the interval start; flips are
    then drawn with probability 1 - exp(-flip_rate dt).  Colored noise like
    this is not guaranteed to reproduce Born statistics exactly; it exists
    to measure such deviations.
    """

    def __init__(self, n_branches: int, amplitude: float, flip_rate: float,
                 rng: np.random.Generator, bias: np.ndarray | None = None):
        self.n_branches = n_branches
        self.amplitude = amplitude
        self.flip_rate = flip_rate
        self.rng = rng
        self.bias = None if bias is None else np.asarray(bias, float)
        self._iu = _upper_pairs(n_branches)
        self.signs = np.where(rng.random(len(self._iu[0])) < 0.5, -1.0, 1.0)

    def sample(self, dt: float, live: np.ndarray | None = None) -> np.ndarray:
        k = self.n_branches
        a = np.zeros((k, k))
        a[self._iu] = self.amplitude * self.signs * dt
        a = a - a.T
        if self.bias is not None:
            a = a + self.bias * dt
        flip = self.rng.random(len(self.signs)) < -np.expm1(-self.flip_rate * dt)
        self.signs[flip] *= -1.0
        return self._mask(a, live)


class ReplayNoise(NoiseModel):
    """Replays a recorded piecewise-constant A_km(t) trace as increments."""

    def __init__(self, dts: np.ndarray, matrices: np.ndarray):
        self.dts = np.asarray(dts, dtype=float)
        self.matrices = np.asarray(matrices, dtype=float)
        if self.matrices.ndim != 3 or len(self.dts) != len(self.matrices):
            raise ValueError("need one matrix per recorded interval")
        self.n_branches = self.matrices.shape[1]
        self._edges = np.concatenate([[0.0], np.cumsum(self.dts)])
        self._t = 0.0

    def sample(self, dt: float, live: np.ndarray | None = None) -> np.ndarray:
        t_end = self._t + dt
        if t_end > self._edges[-1] + 1e-12:
            raise ReplayExhausted(
                f"requested noise to t={t_end:.6g}, trace ends at {self._edges[-1]:.6g}")
        out = np.zeros((self.n_branches, self.n_branches))
        i = int(np.searchsorted(self._edges, self._t, side="right")) - 1
        t = self._t
        while t < t_end - 1e-15 and i < len(self.dts):
            seg_end = min(self._edges[i + 1], t_end)
            out += self.matrices[i] * (seg_end - t)
            t = seg_end
            i += 1
        self._t = t_end
        return self._mask(out, live)


def sample_noise(model: NoiseModel, dt: float, live: np.ndarray | None = None) -> np.ndarray:
    """Draw one antisymmetric pumping increment for the interval dt."""
    return model.sample(dt, live)


@dataclass
class RuinState:
    """Weights and ruin bookkeeping of one pumping game."""

    weights: np.ndarray
    live: np.ndarray = field(default=None)  # type: ignore[assignment]
    time: float = 0.0
    trial_seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.live is None:
            self.live = self.weights > 0.0
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.weights.sum()!r}")

    @property
    def ruined(self) -> np.ndarray:
        return ~self.live


def _apply_interval(w: np.ndarray, live: np.ndarray, increment: np.ndarray,
                    zeta: float, dt: float, cap: float,
                    resample: Optional[Callable[[float], np.ndarray]],
                    depth: int = 0) -> None:
    """One martingale update in place, subdividing when the cap trips."""
    if depth > MAX_DEPTH:
        raise SubdivisionOverflow("step cap kept tripping; noise scale is pathological")
    g = zeta * (increment @ w)
    if np.max(np.abs(g[live]), initial=0.0) <= cap:
        w += w * g
        return
    for _ in range(2):
        sub = resample(0.5 * dt) if resample is not None else 0.5 * increment
        _apply_interval(w, live, sub, zeta, 0.5 * dt, cap, resample, depth + 1)


def _absorb(w: np.ndarray, live: np.ndarray, epsilon: float) -> None:
    newly = live & (w < epsilon)
    if not newly.any() or (live & ~newly).sum() == 0:
        return
    live &= ~newly
    w[~live] = 0.0
    total = w.sum()
    if total > 0.0:
        w /= total


def step_ruin(state: RuinState, increment: np.ndarray, zeta: float, dt: float,
              cap: float = CAP, epsilon: float = DEFAULT_EPSILON,
              resample: Optional[Callable[[float], np.ndarray]] = None) -> RuinState:
    """Advance one noise interval; returns a new state, input untouched.

    ``resample``, when given, supplies fresh increments for cap-triggered
    half-steps (the unbiased choice for stochastic noise); without it the
    original increment is split in half, appropriate for replayed or
    otherwise deterministic coefficient traces.
    """
    w = state.weights.copy()
    live = state.live.copy()
    _apply_interval(w, live, increment, zeta, dt, cap, resample)
    _absorb(w, live, epsilon)
    return RuinState(w, live, state.time + dt, state.trial_seed)


@dataclass
class RuinResult:
    """Outcome of one game: winner branch, steps used, final weights."""

    winner: Optional[int]
    steps: int
    timed_out: bool
    final_weights: np.ndarray
    trial_seed: int = 0
    sum_error: float = 0.0
    revival_violations: int = 0
    trajectory: Optional[tuple[np.ndarray, np.ndarray]] = None  # (times, weights)


def _depth_factors(spec: NoiseSpec, zeta: float, dt: float):
    """Per-subdivision-depth constants shared by every execution path."""
    depths = np.arange(MAX_DEPTH + 2)
    dts = dt / 2.0 ** depths
    if spec.kind == "gaussian":
        factors = zeta * spec.sigma * np.sqrt(dts)
        flip_thr = np.zeros_like(dts)
    elif spec.kind == "telegraph":
        factors = zeta * spec.amplitude * dts
        flip_thr = -np.expm1(-spec.flip_rate * dts)
    else:
        raise ValueError(f"no depth factors for noise kind {spec.kind!r}")
    return factors, flip_thr, zeta * dts


class _RowEngine:
    """Shared driver for the compiled per-row stepper, any batch size."""

    def __init__(self, spec: NoiseSpec, k: int, zeta: float, dt: float,
                 epsilon: float, cap: float, max_steps: int,
                 stop_at_collapse: bool = True, snap_cadence: int = 0,
                 n_snaps: int = 0):
        self.spec = spec
        self.k = k
        self.kind = 0 if spec.kind == "gaussian" else 1
        iu = _upper_pairs(k)
        self.iu_i = iu[0].astype(np.int64)
        self.iu_j = iu[1].astype(np.int64)
        self.n_pairs = len(self.iu_i)
        self.factors, self.flip_thr, self.zeta_dt = _depth_factors(spec, zeta, dt)
        self.bias = np.zeros((k, k)) if spec.bias is None else np.asarray(spec.bias, float)
        self.has_bias = spec.bias is not None
        self.epsilon = epsilon
        self.cap = cap
        self.max_steps = max_steps
        self.stop_at_collapse = stop_at_collapse
        self.snap_cadence = snap_cadence
        self.width = max(1024, 4 * RESERVE_FACTOR) * self.n_pairs
        self.snap_sums = np.zeros((n_snaps, k))
        self.snap_sq = np.zeros((n_snaps, k))
        self.stats = np.zeros(2)

    def _draw(self, gen: np.random.Generator, count: int) -> np.ndarray:
        return gen.standard_normal(count) if self.kind == 0 else gen.random(count)

    def run(self, w: np.ndarray, live: np.ndarray, gens: list,
            signs: np.ndarray | None = None):
        """Advance every row to collapse/horizon; returns (status, steps)."""
        b = w.shape[0]
        status = np.zeros(b, dtype=np.int64)
        steps = np.zeros(b, dtype=np.int64)
        # rows already decided before the first step
        for i in range(b):
            if self.stop_at_collapse and live[i].sum() <= 1:
                status[i] = 1
        buf = np.empty((b, self.width))
        for i in range(b):
            buf[i] = self._draw(gens[i], self.width)
        pos = np.zeros(b, dtype=np.int64)
        need = np.zeros(b, dtype=bool)
        if signs is None:
            signs = np.zeros((b, max(self.n_pairs, 1)))
        while True:
            _run_rows(self.kind, w, live, status, steps, buf, pos, self.width,
                      signs, self.iu_i, self.iu_j, self.factors, self.flip_thr,
                      self.bias, self.has_bias, self.cap, self.epsilon,
                      self.zeta_dt, self.max_steps, self.stop_at_collapse,
                      self.snap_cadence, self.snap_sums, self.snap_sq, need,
                      self.stats)
            if np.any(status == 3):
                raise SubdivisionOverflow(
                    "step cap kept tripping; noise scale is pathological")
            pending = np.flatnonzero(need)
            if len(pending) == 0:
                break
            for i in pending:
                rem = self.width - pos[i]
                if rem > 0:
                    buf[i, :rem] = buf[i, pos[i]:]
                buf[i, rem:] = self._draw(gens[i], self.width - rem)
                pos[i] = 0
                need[i] = False
        return status, steps


@dataclass
class BatchRunResult:
    winners: np.ndarray          # (trials,) branch index, -1 for timeout
    steps: np.ndarray            # (trials,)
    seeds: np.ndarray            # (trials,) derived 64-bit stream ids
    max_sum_error: float
    revival_violations: int
    snap_times: np.ndarray | None = None
    snap_mean_w: np.ndarray | None = None   # (T, K)
    snap_se_w: np.ndarray | None = None


def run_batch(initial_weights: Sequence[float], spec: NoiseSpec, trials: int,
              master_seed: int, zeta: float = 1.0, dt: float = DEFAULT_DT,
              max_steps: int = DEFAULT_MAX_STEPS, epsilon: float = DEFAULT_EPSILON,
              cap: float = CAP, stream_tag: int = 0,
              snapshot_every: int = 0,
              stop_at_collapse: bool = True,
              trial_offset: int = 0) -> BatchRunResult:
    """Run many independent games with per-trial streams.

    Zero-weight branches can never win (the pumping is multiplicative), so
    the game is reduced to the positively weighted branches before stepping;
    winner indices refer to the original branch order.  ``trial_offset``
    shifts the absolute trial indices used for seeding, so a run may be
    partitioned across workers without changing any stream.
    """
    w0 = np.asarray(initial_weights, dtype=float)
    if abs(w0.sum() - 1.0) > 1e-9:
        raise ValueError("initial weights must sum to 1")
    if spec.kind == "replay":
        raise ValueError("replay noise is single-trajectory; use run_to_collapse")
    idx_map = np.flatnonzero(w0 > 0.0)
    if len(idx_map) < len(w0):
        reduced = run_batch(w0[idx_map], spec, trials, master_seed, zeta, dt,
                            max_steps, epsilon, cap, stream_tag, snapshot_every,
                            stop_at_collapse, trial_offset)
        winners = np.where(reduced.winners >= 0, idx_map[reduced.winners], -1)
        out = BatchRunResult(winners, reduced.steps, reduced.seeds,
                             reduced.max_sum_error, reduced.revival_violations)
        if snapshot_every:
            out.snap_times = reduced.snap_times
            out.snap_mean_w = np.zeros((len(reduced.snap_mean_w), len(w0)))
            out.snap_se_w = np.zeros_like(out.snap_mean_w)
            out.snap_mean_w[:, idx_map] = reduced.snap_mean_w
            out.snap_se_w[:, idx_map] = reduced.snap_se_w
        return out
    k = len(w0)
    n_pairs = max(len(_upper_pairs(k)[0]), 1)
    width = max(1024, 4 * RESERVE_FACTOR) * n_pairs
    block_size = max(256, _MEMORY_BUDGET // (width * 8))
    winners = np.full(trials, -1, dtype=np.int64)
    steps_all = np.zeros(trials, dtype=np.int64)
    seeds = np.zeros(trials, dtype=np.uint64)
    n_snaps = (max_steps // snapshot_every) + 1 if snapshot_every else 0
    snap_sums = np.zeros((n_snaps, k))
    snap_sq = np.zeros((n_snaps, k))
    max_sum_err = 0.0
    violations = 0

    for start in range(0, trials, block_size):
        stop = min(start + block_size, trials)
        b = stop - start
        seedseqs = [trial_seed_sequence(master_seed, stream_tag, trial_offset + i)
                    for i in range(start, stop)]
        seeds[start:stop] = [ss.generate_state(1, np.uint64)[0] for ss in seedseqs]
        gens = [np.random.Generator(np.random.PCG64(ss)) for ss in seedseqs]
        w = np.tile(w0, (b, 1))
        live = w > 0.0
        for r in range(b):
            _absorb(w[r], live[r], epsilon)
        signs = None
        if spec.kind == "telegraph":
            signs = np.stack([np.where(g.random(n_pairs) < 0.5, -1.0, 1.0)
                              for g in gens])
        engine = _RowEngine(spec, k, zeta, dt, epsilon, cap, max_steps,
                            stop_at_collapse, snapshot_every, n_snaps)
        if snapshot_every:
            engine.snap_sums[0] += w.sum(axis=0)
            engine.snap_sq[0] += (w ** 2).sum(axis=0)
        status, steps = engine.run(w, live, gens, signs)
        if snapshot_every:
            # rows that collapsed before the horizon contribute frozen weights
            # to the remaining snapshot rows
            for i in range(b):
                first = steps[i] // snapshot_every + 1
                if status[i] == 1 and first < n_snaps:
                    snap_sums[first:] += w[i]
                    snap_sq[first:] += w[i] ** 2
            snap_sums += engine.snap_sums
            snap_sq += engine.snap_sq
        alive_one = live.sum(axis=1) == 1
        blk_w = winners[start:stop]
        blk_w[alive_one] = np.argmax(live[alive_one], axis=1)
        steps_all[start:stop] = steps
        max_sum_err = max(max_sum_err, float(engine.stats[0]))
        violations += int(engine.stats[1])

    result = BatchRunResult(winners, steps_all, seeds, max_sum_err, violations)
    if snapshot_every:
        mean = snap_sums / trials
        var = snap_sq / trials - mean ** 2
        result.snap_times = np.arange(n_snaps) * snapshot_every * dt
        result.snap_mean_w = mean
        result.snap_se_w = np.sqrt(np.maximum(var, 0.0) / trials)
    return result


def run_to_collapse(initial_weights: Sequence[float], model: NoiseModel, zeta: float,
                    dt: float = DEFAULT_DT, max_steps: int = DEFAULT_MAX_STEPS,
                    epsilon: float = DEFAULT_EPSILON, cap: float = CAP,
                    trial_seed: int = 0, record_every: int = 0) -> RuinResult:
    """Play one game to absorption (or step timeout).

    Gaussian and telegraph models run through the same per-row engine as
    batches (identical draws and arithmetic); replay and custom models use
    the matrix path with same-increment subdivision.  Games with zero-weight
    branches are reduced to the positive ones, which matches run_batch draw
    for draw with gaussian noise; a telegraph model has already drawn flip
    states for the full branch set, so there the reduced single-trial stream
    differs from a batch.
    """
    w = np.asarray(initial_weights, dtype=float).copy()
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("initial weights must sum to 1")
    live = w > 0.0
    w[~live] = 0.0

    if isinstance(model, (GaussianWhiteNoise, TelegraphNoise)) and not live.all():
        # reduce to the positive branches, mirroring run_batch exactly
        idx_map = np.flatnonzero(live)
        sub_model = (GaussianWhiteNoise(len(idx_map), model.sigma, model.rng,
                                        None if model.bias is None
                                        else model.bias[np.ix_(idx_map, idx_map)])
                     if isinstance(model, GaussianWhiteNoise)
                     else TelegraphNoise(len(idx_map), model.amplitude,
                                         model.flip_rate, model.rng,
                                         None if model.bias is None
                                         else model.bias[np.ix_(idx_map, idx_map)]))
        res = run_to_collapse(w[idx_map], sub_model, zeta, dt, max_steps, epsilon,
                              cap, trial_seed, record_every)
        final = np.zeros_like(w)
        final[idx_map] = res.final_weights
        winner = None if res.winner is None else int(idx_map[res.winner])
        trajectory = res.trajectory
        if trajectory is not None:
            times, traj = trajectory
            full = np.zeros((len(traj), len(w)))
            full[:, idx_map] = traj
            trajectory = (times, full)
        return RuinResult(winner, res.steps, res.timed_out, final, trial_seed,
                          res.sum_error, res.revival_violations, trajectory)

    _absorb(w, live, epsilon)

    if isinstance(model, (GaussianWhiteNoise, TelegraphNoise)):
        if isinstance(model, GaussianWhiteNoise):
            spec = NoiseSpec("gaussian", sigma=model.sigma, bias=model.bias)
            signs = None
        else:
            spec = NoiseSpec("telegraph", amplitude=model.amplitude,
                             flip_rate=model.flip_rate, bias=model.bias)
            signs = model.signs.copy()[None, :]
        n_snaps = (max_steps // record_every) + 1 if record_every else 0
        engine = _RowEngine(spec, len(w), zeta, dt, epsilon, cap, max_steps,
                            True, record_every, n_snaps)
        wb = w[None, :].copy()
        lb = live[None, :].copy()
        if record_every:
            engine.snap_sums[0] += wb[0]
        status, steps = engine.run(wb, lb, [model.rng], signs)
        if signs is not None:
            model.signs[:] = signs[0]
        w, live = wb[0], lb[0]
        timed_out = bool(status[0] == 2)
        winner = None if timed_out else int(np.argmax(live))
        trajectory = None
        if record_every:
            n_rec = int(steps[0]) // record_every + 1
            times = np.arange(n_rec) * record_every * dt
            trajectory = (times, engine.snap_sums[:n_rec].copy())
        return RuinResult(winner, int(steps[0]), timed_out, w, trial_seed,
                          float(engine.stats[0]), int(engine.stats[1]), trajectory)

    # matrix path: replayed or user-supplied noise
    times = [0.0]
    traj = [w.copy()]
    sum_err = 0.0
    violations = 0
    steps = 0
    t = 0.0
    while live.sum() > 1 and steps < max_steps:
        inc = model.sample(dt, live)
        _apply_interval(w, live, inc, zeta, dt, cap, None)
        _absorb(w, live, epsilon)
        t += dt
        steps += 1
        sum_err = max(sum_err, abs(w.sum() - 1.0))
        if np.any(w[~live] != 0.0):
            violations += 1
        if record_every and steps % record_every == 0:
            times.append(t)
            traj.append(w.copy())
    timed_out = live.sum() > 1
    winner = None if timed_out else int(np.argmax(live))
    trajectory = (np.array(times), np.array(traj)) if record_every else None
    return RuinResult(winner, steps, timed_out, w, trial_seed, sum_err, violations,
                      trajectory)


@dataclass
class BornReport:
    """Winner statistics of a trial ensemble, with Wilson intervals."""

    initial_weights: np.ndarray
    trials: int
    counts: np.ndarray
    frequencies: np.ndarray
    wilson_low: np.ndarray
    wilson_high: np.ndarray
    timeouts: int
    master_seed: int
    winners: np.ndarray
    steps: np.ndarray
    seeds: np.ndarray
    max_sum_error: float
    revival_violations: int

    @property
    def mean_steps(self) -> float:
        return float(self.steps[self.winners >= 0].mean()) if (self.winners >= 0).any() else 0.0


def _wilson(successes: np.ndarray, n: int, z: float = 1.959963984540054):
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return center - half, center + half


def born_statistics(initial_weights: Sequence[float], spec: NoiseSpec, trials: int,
                    master_seed: int, zeta: float = 1.0, dt: float = DEFAULT_DT,
                    max_steps: int = DEFAULT_MAX_STEPS, epsilon: float = DEFAULT_EPSILON,
                    cap: float = CAP, stream_tag: int = 0) -> BornReport:
    """Winner frequencies over an ensemble of independent games."""
    if trials < 1:
        raise ValueError("need at least one trial")
    w0 = np.asarray(initial_weights, dtype=float)
    res = run_batch(w0, spec, trials, master_seed, zeta, dt, max_steps, epsilon,
                    cap, stream_tag)
    k = len(w0)
    counts = np.bincount(res.winners[res.winners >= 0], minlength=k)[:k]
    freq = counts / trials
    lo, hi = _wilson(counts.astype(float), trials)
    timeouts = int((res.winners < 0).sum())
    return BornReport(w0, trials, counts, freq, lo, hi, timeouts, master_seed,
                      res.winners, res.steps, res.seeds, res.max_sum_error,
                      res.revival_violations)


@dataclass
class DriftReport:
    """Ensemble mean weights versus time, with significance flags."""

    times: np.ndarray
    mean_w: np.ndarray
    se_w: np.ndarray
    initial_weights: np.ndarray
    flag_threshold: float
    max_deviation_sigma: float
    flagged: bool


def martingale_diagnostic(initial_weights: Sequence[float], spec: NoiseSpec,
                          trials: int, master_seed: int, horizon_steps: int,
                          snapshot_every: int, zeta: float = 1.0,
                          dt: float = DEFAULT_DT, epsilon: float = DEFAULT_EPSILON,
                          cap: float = CAP, stream_tag: int = 0,
                          flag_threshold: float = 3.5) -> DriftReport:
    """Estimate E[w_k(t)] - w_k(0) over an ensemble and flag significant drift.

    Absorbed games keep contributing their frozen weights, so a fair game
    has constant ensemble means at all times.
    """
    if trials < 100:
        raise ValueError("martingale diagnostic needs at least 100 trajectories")
    w0 = np.asarray(initial_weights, dtype=float)
    res = run_batch(w0, spec, trials, master_seed, zeta, dt, horizon_steps, epsilon,
                    cap, stream_tag, snapshot_every=snapshot_every,
                    stop_at_collapse=False)
    drift = res.snap_mean_w - w0[None, :]
    se = np.maximum(res.snap_se_w, 1e-15)
    sigmas = np.abs(drift) / se
    # t=0 row has zero variance by construction; ignore it for flagging
    max_sigma = float(sigmas[1:].max()) if len(sigmas) > 1 else 0.0
    return DriftReport(res.snap_times, res.snap_mean_w, res.snap_se_w, w0,
                       flag_threshold, max_sigma, bool(max_sigma > flag_threshold))