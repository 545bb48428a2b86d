"""Full nonlinear branch-block dynamics over the joint detector space.

The state after the fast linear measurement interaction is a superposition
of branches k (one per hit-pattern of the detector set) with constant
amplitudes c_k and detector-space blocks R_kl.  Nonlinearity pumps weight
w_k = |c_k|^2 Tr R_kk between branches:

    dR_kl/dt = zeta * sum_m w_m ( <p_d>_m {x_d, R_kl} - <x_d>_m {p_d, R_kl} )

summed over detectors d, where <.>_m are branch mean values.  The pumping
rates close to dw_k/dt = zeta sum_m w_k w_m A_km with an antisymmetric
coefficient matrix A, which conserves the total weight; branches whose
weight falls below an absorption threshold are ruined (gambler's ruin) and
never revived.

Default integration is interaction-picture Strang splitting: exact
eigendecomposition propagators for the linear detector Hamiltonians around
an RK4 step of the nonlinear flow.  A "schroedinger" mode integrates the
linear commutator inside RK4 instead, for cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detector import DetectorModel, KickedOscillator
from .hilbert import TRACE_FLOOR, VanishedBranch

DEFAULT_EPSILON = 1e-6
WEIGHT_STEP_TOL = 1e-10
WEIGHT_TOTAL_TOL = 1e-6
DT_MIN = 1e-12


class IntegrationDiverged(Exception):
    """Total weight drifted beyond tolerance; the trajectory is unusable."""


class StepSizeUnderflow(Exception):
    """Adaptive halving hit the minimum step without meeting tolerance."""


@dataclass(frozen=True)
class BranchLabel:
    """Branch identity: index and per-detector hit pattern."""

    id: int
    hit_pattern: tuple[bool, ...]


@dataclass
class WeightVector:
    """Branch weights, normalized to unit sum.

    ``total_raw`` is the pre-normalization sum |c_k|^2 Tr R_kk; its drift
    from 1 is the integrator's conservation error and is what conservation
    invariants monitor.
    """

    w: np.ndarray
    total_raw: float = 1.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.w < -1e-12):
            raise ValueError(f"negative weight in {self.w}")
        self.w = np.maximum(self.w, 0.0)
        if abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.w.sum()!r}, not 1")


@dataclass
class PumpingMatrix:
    """Antisymmetric dimensionless pumping coefficients A_km."""

    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if np.max(np.abs(self.a + self.a.T)) != 0.0:
            raise ValueError("pumping matrix must be exactly antisymmetric")


class DetectorSpace:
    """Joint configuration space of a detector set, with lifted operators."""

    def __init__(self, models: Sequence[DetectorModel]):
        if not models:
            raise ValueError("need at least one detector")
        self.models = list(models)
        self.dims = [m.dim for m in self.models]
        self.total_dim = int(np.prod(self.dims))
        self.x_diags: list[np.ndarray] = []
        self.p_ops: list[np.ndarray] = []
        h0_full = np.zeros((self.total_dim, self.total_dim), dtype=complex)
        for d, model in enumerate(self.models):
            self.x_diags.append(self._lift_diag(model.grid.points, d))
            self.p_ops.append(self._lift(model.momentum_operator().matrix, d))
            h0_full += self._lift(model.hamiltonian().matrix, d)
        self.h0_full = h0_full
        self._u_cache: dict = {}

    @property
    def n_detectors(self) -> int:
        return len(self.models)

    def _lift(self, op: np.ndarray, d: int) -> np.ndarray:
        pre = int(np.prod(self.dims[:d], initial=1))
        post = int(np.prod(self.dims[d + 1:], initial=1))
        return np.kron(np.kron(np.eye(pre), op), np.eye(post))

    def _lift_diag(self, diag: np.ndarray, d: int) -> np.ndarray:
        pre = int(np.prod(self.dims[:d], initial=1))
        post = int(np.prod(self.dims[d + 1:], initial=1))
        return np.kron(np.kron(np.ones(pre), diag), np.ones(post))

    def _detector_unitary(self, d: int, t0: float, duration: float) -> np.ndarray:
        """Matrix propagator of one detector, kicks included."""
        model = self.models[d]
        kick = model.kick_unitary()
        if kick is None:
            return model.propagator(duration)
        period = model.potential.period
        t_end = t0 + duration
        u = np.eye(model.dim, dtype=complex)
        t = t0
        n = int(np.floor(t0 / period + 1e-12)) + 1
        while n * period <= t_end + 1e-12:
            u = kick[:, None] * (model.propagator(n * period - t) @ u)
            t = n * period
            n += 1
        if t_end > t:
            u = model.propagator(t_end - t) @ u
        return u

    def joint_unitary(self, t0: float, duration: float) -> np.ndarray:
        """exp(-i H0 duration) over the joint space (tensor product of detectors)."""
        static = not any(isinstance(m.potential, KickedOscillator) for m in self.models)
        key = round(duration, 15) if static else None
        if key is not None and key in self._u_cache:
            return self._u_cache[key]
        u = self._detector_unitary(0, t0, duration)
        for d in range(1, len(self.models)):
            u = np.kron(u, self._detector_unitary(d, t0, duration))
        if key is not None:
            self._u_cache[key] = u
        return u


@dataclass
class SystemState:
    """Branch blocks, amplitudes and bookkeeping for one trajectory."""

    c: np.ndarray
    blocks: np.ndarray  # (K, K, N, N) complex
    labels: list[BranchLabel]
    space: DetectorSpace
    zeta: float
    time: float = 0.0
    live: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        k = len(self.c)
        if self.blocks.shape[:2] != (k, k):
            raise ValueError("block grid does not match branch count")
        if self.live is None:
            self.live = np.ones(k, dtype=bool)

    @property
    def n_branches(self) -> int:
        return len(self.c)

    def copy(self) -> "SystemState":
        return SystemState(self.c.copy(), self.blocks.copy(), list(self.labels),
                          self.space, self.zeta, self.time, self.live.copy())


def assemble_initial_state(c: Sequence[complex], labels: Sequence[BranchLabel],
                           detector_states: Sequence[Sequence[np.ndarray]],
                           space: DetectorSpace, zeta: float) -> SystemState:
    """Build branch blocks R_kl from per-(branch, detector) state vectors.

    Each |Phi_k> is the tensor product over detectors of the sampled states;
    R_kl = |Phi_k><Phi_l|, so every diagonal block has unit trace and the
    initial weights are |c_k|^2.
    """
    c = np.asarray(c, dtype=complex)
    k = len(c)
    norm = np.sum(np.abs(c) ** 2)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"amplitudes not normalized: sum |c|^2 = {norm!r}")
    c = c / np.sqrt(norm)
    patterns = {lab.hit_pattern for lab in labels}
    if len(labels) != k or len(patterns) != k:
        raise ValueError("branch labels must be distinct hit patterns, one per amplitude")
    if len(detector_states) != k:
        raise ValueError("need one state list per branch")
    phis = []
    for states in detector_states:
        if len(states) != space.n_detectors:
            raise ValueError("need one state per detector in each branch")
        phi = np.array([1.0], dtype=complex)
        for d, psi in enumerate(states):
            psi = np.asarray(psi, dtype=complex)
            if psi.shape != (space.dims[d],):
                raise ValueError(f"detector {d} state has shape {psi.shape}, "
                                 f"expected ({space.dims[d]},)")
            if abs(np.linalg.norm(psi) - 1.0) > 1e-10:
                raise ValueError("detector states must be normalized")
            phi = np.kron(phi, psi)
        phis.append(phi)
    n = space.total_dim
    blocks = np.empty((k, k, n, n), dtype=complex)
    for i in range(k):
        for j in range(k):
            blocks[i, j] = np.outer(phis[i], phis[j].conj())
    return SystemState(c, blocks, list(labels), space, zeta)


def _raw_weights(state: SystemState) -> np.ndarray:
    c2 = np.abs(state.c) ** 2
    traces = np.einsum("kkii->k", state.blocks).real
    w = np.where(state.live, c2 * traces, 0.0)
    return w


def compute_weights(state: SystemState) -> WeightVector:
    """Current branch weights w_k = |c_k|^2 Tr R_kk (ruined branches: 0)."""
    w = _raw_weights(state)
    total = float(w.sum())
    if abs(total - 1.0) > WEIGHT_TOTAL_TOL:
        raise IntegrationDiverged(f"total weight {total!r} drifted beyond tolerance")
    return WeightVector(w / total, total_raw=total)


def _branch_means(blocks: np.ndarray, live: np.ndarray, space: DetectorSpace,
                  trace_floor: float = TRACE_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Mean <x_d>_k and <p_d>_k for live branches ((D, K) arrays, 0 for ruined)."""
    k = blocks.shape[0]
    n_det = space.n_detectors
    xs = np.zeros((n_det, k))
    ps = np.zeros((n_det, k))
    for ki in range(k):
        if not live[ki]:
            continue
        r = blocks[ki, ki]
        diag = r.diagonal().real
        tr = diag.sum()
        if tr <= trace_floor:
            raise VanishedBranch(f"live branch {ki} has trace {tr:.3e}")
        for d in range(n_det):
            xs[d, ki] = float(space.x_diags[d] @ diag) / tr
            ps[d, ki] = float(np.sum(space.p_ops[d].T * r).real) / tr
    return xs, ps


def mean_value_of_full_block(state: SystemState, branch: int, op: np.ndarray,
                             trace_floor: float = TRACE_FLOOR) -> float:
    """Branch mean of a joint-space observable (1-d input = diagonal operator)."""
    r = state.blocks[branch, branch]
    tr = np.trace(r).real
    if tr <= trace_floor:
        raise VanishedBranch(f"branch {branch} has trace {tr:.3e}")
    op = np.asarray(op)
    if op.ndim == 1:
        return float(op @ r.diagonal().real) / tr
    return float(np.trace(r @ op).real) / tr


def pumping_coefficients(state: SystemState) -> PumpingMatrix:
    """Antisymmetric pumping matrix A_km = 2 sum_d (<x_d>_k <p_d>_m - <x_d>_m <p_d>_k).

    Computed as the explicit difference, so A + A^T vanishes identically in
    floating point.  Ruined branches (including any branch whose trace has
    vanished) get zero rows and columns.
    """
    live = state.live.copy()
    try:
        xs, ps = _branch_means(state.blocks, live, state.space)
    except VanishedBranch:
        # exclude freshly vanished branches instead of failing
        for ki in range(state.n_branches):
            if live[ki] and state.blocks[ki, ki].diagonal().real.sum() <= TRACE_FLOOR:
                live[ki] = False
        xs, ps = _branch_means(state.blocks, live, state.space)
    return PumpingMatrix(_pumping_from_means(xs, ps))


def _pumping_from_means(xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
    k = xs.shape[1]
    a = np.zeros((k, k))
    for d in range(xs.shape[0]):
        a += 2.0 * (np.outer(xs[d], ps[d]) - np.outer(ps[d], xs[d]))
    return a


def pumping_rates(weights: WeightVector, a: PumpingMatrix, zeta: float) -> np.ndarray:
    """dw_k/dt = zeta w_k sum_m w_m A_km; sums to zero by antisymmetry."""
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, float)
    return zeta * w * (a.a @ w)


def no_heating_check(state: SystemState, relative: bool = False) -> float:
    """|i zeta Tr[(x rho p - p rho x) rho]| over the full density matrix.

    The trace vanishes identically by cyclic invariance; the returned number
    is the floating-point residual.  With ``relative=True`` it is divided by
    the sum of the absolute values of the individual trace terms (the natural
    matrix scale of the cancellation).
    """
    c2 = np.abs(state.c) ** 2
    k = state.n_branches
    total = 0.0 + 0.0j
    scale = 0.0
    for d in range(state.space.n_detectors):
        p = state.space.p_ops[d]
        x = state.space.x_diags[d]
        for ki in range(k):
            for li in range(k):
                r_kl = state.blocks[ki, li]
                r_lk = state.blocks[li, ki]
                pr_lk = p @ r_lk
                t1 = np.einsum("i,ij,ji->", x, r_kl, pr_lk)
                t2 = np.einsum("ij,j,ji->", p @ r_kl, x, r_lk)
                weight = c2[ki] * c2[li]
                total += weight * (t1 - t2)
                scale += weight * (abs(t1) + abs(t2))
    value = abs(1j * state.zeta * total)
    if relative:
        denom = state.zeta * scale
        return value / denom if denom > 0.0 else 0.0
    return value


def detect_collapse(weights, epsilon: float = DEFAULT_EPSILON) -> Optional[int]:
    """Winner index once all weight sits on one branch, else None.

    A winner needs exactly one weight above 1 - (K-1) epsilon with every
    other weight below epsilon.  A single-branch game wins immediately.
    """
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, float)
    k = len(w)
    if k == 1:
        return 0
    big = w > 1.0 - (k - 1) * epsilon
    small = w < epsilon
    if big.sum() == 1 and small.sum() == k - 1:
        return int(np.argmax(w))
    return None


def _nonlinear_generator(blocks: np.ndarray, live: np.ndarray, c2: np.ndarray,
                         space: DetectorSpace, zeta: float) -> np.ndarray:
    """G = zeta sum_m w_m sum_d (<p_d>_m x_d - <x_d>_m p_d); flow is dR = {G, R}."""
    traces = np.einsum("kkii->k", blocks).real
    w = np.where(live, c2 * traces, 0.0)
    xs, ps = _branch_means(blocks, live, space)
    n = space.total_dim
    g_diag = np.zeros(n)
    g = np.zeros((n, n), dtype=complex)
    for d in range(space.n_detectors):
        g_diag += zeta * float(w @ ps[d]) * space.x_diags[d]
        g -= zeta * float(w @ xs[d]) * space.p_ops[d]
    g[np.diag_indices(n)] += g_diag
    return g


class _Scratch:
    """Reusable block-grid buffers; allocation dominates on slow memory."""

    def __init__(self, k: int, n: int):
        shape = (k, k, n, n)
        self.s = np.empty(shape, dtype=complex)
        self.adj = np.empty(shape, dtype=complex)
        self.stage = np.empty(shape, dtype=complex)
        self.acc = np.empty(shape, dtype=complex)
        self.kbuf = np.empty(shape, dtype=complex)


def _right_mult_adjoint_sum(blocks: np.ndarray, m: np.ndarray, out: np.ndarray,
                            work: _Scratch) -> np.ndarray:
    """out_kl = R_kl m + (R_lk m)^dag, using the Hermitian pairing R_lk = R_kl^dag.

    With m = G (Hermitian) this is the anticommutator {G, R_kl}; with
    m = G + i H0 it adds the linear commutator -i [H0, R_kl].  One batched
    GEMM serves both left and right products, and the construction preserves
    the pairing exactly.
    """
    k, n = blocks.shape[0], blocks.shape[2]
    np.matmul(blocks.reshape(k * k * n, n), m, out=work.s.reshape(k * k * n, n))
    np.conjugate(work.s.transpose(1, 0, 3, 2), out=work.adj)
    np.add(work.s, work.adj, out=out)
    return out


def _flow_deriv(blocks: np.ndarray, live: np.ndarray, c2: np.ndarray,
                space: DetectorSpace, zeta: float, h0: np.ndarray | None,
                out: np.ndarray, work: _Scratch) -> np.ndarray:
    m = _nonlinear_generator(blocks, live, c2, space, zeta)
    if h0 is not None:
        m = m + 1j * h0
    return _right_mult_adjoint_sum(blocks, m, out, work)


def _rk4(blocks: np.ndarray, live: np.ndarray, c2: np.ndarray, space: DetectorSpace,
         zeta: float, dt: float, h0: np.ndarray | None,
         work: _Scratch | None = None) -> np.ndarray:
    if work is None:
        work = _Scratch(blocks.shape[0], blocks.shape[2])
    acc, kb, stage = work.acc, work.kbuf, work.stage
    _flow_deriv(blocks, live, c2, space, zeta, h0, kb, work)          # k1
    np.copyto(acc, kb)
    np.multiply(kb, 0.5 * dt, out=stage); stage += blocks
    _flow_deriv(stage, live, c2, space, zeta, h0, kb, work)           # k2
    acc += 2.0 * kb
    np.multiply(kb, 0.5 * dt, out=stage); stage += blocks
    _flow_deriv(stage, live, c2, space, zeta, h0, kb, work)           # k3
    acc += 2.0 * kb
    np.multiply(kb, dt, out=stage); stage += blocks
    _flow_deriv(stage, live, c2, space, zeta, h0, kb, work)           # k4
    acc += kb
    return blocks + (dt / 6.0) * acc


def _conjugate_blocks(blocks: np.ndarray, u: np.ndarray,
                      work: _Scratch | None = None) -> np.ndarray:
    """R_kl -> U R_kl U^dag for every block, via two right-GEMMs.

    T_kl = R_kl U^dag gives U R_kl = T_lk^dag (pairing), so the left product
    is a second right multiplication of the adjoint-swapped grid.
    """
    k, n = blocks.shape[0], blocks.shape[2]
    if work is None:
        work = _Scratch(k, n)
    u_dag = u.conj().T
    np.matmul(blocks.reshape(k * k * n, n), u_dag, out=work.s.reshape(k * k * n, n))
    np.conjugate(work.s.transpose(1, 0, 3, 2), out=work.adj)
    out = np.empty_like(blocks)
    np.matmul(work.adj.reshape(k * k * n, n), u_dag, out=out.reshape(k * k * n, n))
    return out


def _attempt_step(state: SystemState, dt: float, picture: str,
                  work: _Scratch | None = None) -> np.ndarray:
    c2 = np.abs(state.c) ** 2
    if work is None:
        work = _Scratch(state.n_branches, state.space.total_dim)
    if picture == "interaction":
        u = state.space.joint_unitary(state.time, 0.5 * dt)
        blocks = _conjugate_blocks(state.blocks, u, work)
        blocks = _rk4(blocks, state.live, c2, state.space, state.zeta, dt, None, work)
        u2 = state.space.joint_unitary(state.time + 0.5 * dt, 0.5 * dt)
        return _conjugate_blocks(blocks, u2, work)
    if picture == "schroedinger":
        return _rk4(state.blocks, state.live, c2, state.space, state.zeta, dt,
                    state.space.h0_full, work)
    raise ValueError(f"unknown picture {picture!r}")


def _absorb_ruined(state: SystemState, epsilon: float) -> None:
    """Zero out branches below threshold, redistribute weight to live ones."""
    w = _raw_weights(state)
    total = w.sum()
    newly = state.live & (w < epsilon * total)
    if not newly.any() or newly.all():
        return
    state.live &= ~newly
    keep = w[state.live].sum()
    if keep <= 0.0:
        return
    scale = total / keep
    dead = ~state.live
    state.blocks[dead, :, :, :] = 0.0
    state.blocks[:, dead, :, :] = 0.0
    alive = np.where(state.live)[0]
    state.blocks[np.ix_(alive, alive)] *= scale


def step(state: SystemState, dt: float, picture: str = "interaction",
         weight_tol: float = WEIGHT_STEP_TOL, dt_min: float = DT_MIN,
         epsilon: float = DEFAULT_EPSILON) -> SystemState:
    """Advance one step; reject and halve when total weight drifts.

    Returns a new state; the input is untouched.  Ruined branches are
    absorbed after the step is accepted.
    """
    before = _raw_weights(state).sum()
    try:
        new_blocks = _attempt_step(state, dt, picture)
        traces = np.einsum("kkii->k", new_blocks).real
        after = float(np.where(state.live, np.abs(state.c) ** 2 * traces, 0.0).sum())
        drift = abs(after - before)
    except VanishedBranch:
        new_blocks = None
        drift = np.inf
    if drift > weight_tol:
        if dt * 0.5 < dt_min:
            raise StepSizeUnderflow(
                f"weight drift {drift:.2e} > {weight_tol:.1e} at dt={dt:.2e}")
        half = step(state, 0.5 * dt, picture, weight_tol, dt_min, epsilon)
        return step(half, 0.5 * dt, picture, weight_tol, dt_min, epsilon)
    out = SystemState(state.c, new_blocks, state.labels, state.space, state.zeta,
                      state.time + dt, state.live.copy())
    _absorb_ruined(out, epsilon)
    return out


@dataclass
class TrajectoryRecord:
    """Per-step observables of one full-dynamics run."""

    times: np.ndarray
    weights: np.ndarray        # (steps+1, K) raw weights
    total_raw: np.ndarray      # (steps+1,)
    live: np.ndarray           # (steps+1, K) bool
    noheat_rel: np.ndarray | None = None
    pumping: np.ndarray | None = None   # (steps+1, K, K)
    dts: np.ndarray | None = None

    @property
    def max_conservation_error(self) -> float:
        return float(np.max(np.abs(self.total_raw - 1.0)))

    @property
    def hit_pattern_mask(self) -> np.ndarray:
        return self.live


def _nl_substep(state: SystemState, dt: float, work: _Scratch,
                weight_tol: float, dt_min: float) -> None:
    """Nonlinear RK4 update in place, with drift-rejection halving.

    A VanishedBranch raised inside a stage evaluation means the trial step
    left the physical region entirely (gross instability); it is treated the
    same as a weight-drift rejection.
    """
    c2 = np.abs(state.c) ** 2
    before = _raw_weights(state).sum()
    try:
        new_blocks = _rk4(state.blocks, state.live, c2, state.space, state.zeta, dt,
                          None, work)
        traces = np.einsum("kkii->k", new_blocks).real
        after = float(np.where(state.live, c2 * traces, 0.0).sum())
        drift = abs(after - before)
    except VanishedBranch:
        new_blocks = None
        drift = np.inf
    if drift > weight_tol:
        if 0.5 * dt < dt_min:
            raise StepSizeUnderflow(
                f"weight drift {drift:.2e} > {weight_tol:.1e} at dt={dt:.2e}")
        _nl_substep(state, 0.5 * dt, work, weight_tol, dt_min)
        _nl_substep(state, 0.5 * dt, work, weight_tol, dt_min)
        return
    state.blocks = new_blocks


def run_trajectory(state: SystemState, dt: float, n_steps: int,
                   picture: str = "interaction", epsilon: float = DEFAULT_EPSILON,
                   weight_tol: float = WEIGHT_STEP_TOL,
                   record_noheat: bool = False, record_pumping: bool = False,
                   stop_on_collapse: bool = False) -> tuple[SystemState, TrajectoryRecord]:
    """Run ``n_steps`` accepted steps, recording weights and diagnostics.

    In the interaction picture the half-step unitaries of adjacent Strang
    steps are merged (U(dt/2) NL U(dt) NL ... U(dt/2)), which halves the
    linear work; recorded weights are unitary-invariant, so snapshots agree
    with the unmerged composition to roundoff.  Pumping matrices are recorded
    at the splitting midpoints, where the nonlinear update actually uses them.
    """
    k = state.n_branches
    times = np.empty(n_steps + 1)
    weights = np.empty((n_steps + 1, k))
    totals = np.empty(n_steps + 1)
    live = np.empty((n_steps + 1, k), dtype=bool)
    noheat = np.empty(n_steps + 1) if record_noheat else None
    pump = np.empty((n_steps + 1, k, k)) if record_pumping else None
    state = state.copy()
    _absorb_ruined(state, epsilon)
    work = _Scratch(k, state.space.total_dim)

    def snapshot(i: int, s: SystemState) -> None:
        raw = _raw_weights(s)
        times[i] = s.time
        weights[i] = raw
        totals[i] = raw.sum()
        live[i] = s.live
        if noheat is not None:
            noheat[i] = no_heating_check(s, relative=True)
        if pump is not None:
            pump[i] = pumping_coefficients(s).a

    snapshot(0, state)
    n_done = 0
    if picture == "interaction" and n_steps > 0:
        space = state.space
        # opening half-step into the splitting midframe
        state.blocks = _conjugate_blocks(
            state.blocks, space.joint_unitary(state.time, 0.5 * dt), work)
        for i in range(n_steps):
            if i > 0:
                # merged closing+opening halves of adjacent Strang steps
                state.blocks = _conjugate_blocks(
                    state.blocks, space.joint_unitary(state.time - 0.5 * dt, dt), work)
            _nl_substep(state, dt, work, weight_tol, DT_MIN)
            state.time += dt
            _absorb_ruined(state, epsilon)
            snapshot(i + 1, state)
            n_done = i + 1
            if stop_on_collapse and detect_collapse(_raw_weights(state), epsilon) is not None:
                break
        # closing half-step back to the canonical frame
        state.blocks = _conjugate_blocks(
            state.blocks, space.joint_unitary(state.time - 0.5 * dt, 0.5 * dt), work)
    else:
        for i in range(n_steps):
            state = step(state, dt, picture, weight_tol, DT_MIN, epsilon)
            snapshot(i + 1, state)
            n_done = i + 1
            if stop_on_collapse and detect_collapse(_raw_weights(state), epsilon) is not None:
                break
    end = n_done + 1
    rec = TrajectoryRecord(times[:end], weights[:end], totals[:end], live[:end],
                           noheat[:end] if noheat is not None else None,
                           pump[:end] if pump is not None else None,
                           dts=np.full(max(end - 1, 0), dt))
    return state, rec


def hermitian_pairing_defect(state: SystemState) -> float:
    """Max-entry deviation of R_kl from R_lk^dagger over all block pairs."""
    k = state.n_branches
    worst = 0.0
    for i in range(k):
        for j in range(k):
            dev = np.max(np.abs(state.blocks[i, j] - state.blocks[j, i].conj().T))
            worst = max(worst, float(dev))
    return worst
