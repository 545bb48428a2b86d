"""Invariant suites behind the validate CLI command.

Each check returns (ok, detail).  The fast level covers the algebraic and
statistical invariants in a few seconds; the full level adds the expensive
cross-validations (product vs full tensor, the brute-force reference
integrator, replay consistency).  Checks accept injectable compute hooks
where a deliberate fault must be detectable by the suite's own logic.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .detector import BiasedDoubleWell, DetectorModel, InvertedOscillator
from .hilbert import Grid, Operator, BlockMatrix, anticommutator, gaussian_packet, \
    hermiticity_defect, mean_value, build_momentum_operator, build_position_operator
from .dynamics_full import (
    BranchLabel,
    DetectorSpace,
    PumpingMatrix,
    SystemState,
    WeightVector,
    assemble_initial_state,
    hermitian_pairing_defect,
    no_heating_check,
    pumping_coefficients,
    pumping_rates,
    run_trajectory,
    _pumping_from_means,
    _raw_weights,
)
from .dynamics_product import (
    assemble_product_state,
    local_weight_rates,
    local_weights,
    reconstruct_global_weights,
    run_product_trajectory,
)
from .ruin import NoiseSpec, ReplayNoise, martingale_diagnostic, run_batch, run_to_collapse


def _two_branch_instance(dim=8, zeta=0.1, curvature=1.0):
    grid = Grid(dim, -6.0, 6.0)
    model = DetectorModel(grid, InvertedOscillator(curvature, 0.05))
    space = DetectorSpace([model])
    labels = [BranchLabel(0, (True,)), BranchLabel(1, (False,))]
    hit = gaussian_packet(grid, 0.0, 1.0, 1.0)
    quiet = gaussian_packet(grid, 0.3, 0.0, 1.0)
    state = assemble_initial_state([np.sqrt(0.4), np.sqrt(0.6)], labels,
                                   [[hit], [quiet]], space, zeta)
    return state, model, (hit, quiet)


def check_operator_hermiticity() -> tuple[bool, str]:
    grid = Grid(64, -10.0, 10.0)
    worst = 0.0
    for op in (build_position_operator(grid), build_momentum_operator(grid),
               build_momentum_operator(grid, "central")):
        worst = max(worst, hermiticity_defect(op.matrix))
    return worst <= 1e-12, f"max |A - A^dag| = {worst:.2e} (tol 1e-12)"


def check_anticommutator_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    b = BlockMatrix(rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)))
    res = anticommutator(Operator(np.eye(6)), b)
    dev = float(np.max(np.abs(res.matrix - 2.0 * b.matrix)))
    return dev <= 1e-14, f"max |{{I,B}} - 2B| = {dev:.2e} (tol 1e-14)"


def check_mean_value_scaling() -> tuple[bool, str]:
    grid = Grid(32, -6.0, 6.0)
    g = gaussian_packet(grid, 0.8, -0.5, 0.7)
    block = BlockMatrix(np.outer(g, g.conj()))
    xop = build_position_operator(grid)
    dev = abs(mean_value(BlockMatrix(7.0 * block.matrix), xop) - mean_value(block, xop))
    return dev <= 1e-12, f"scaling deviation {dev:.2e} (tol 1e-12)"


def check_pumping_antisymmetry(pumping_fn: Callable | None = None) -> tuple[bool, str]:
    """A + A^T must vanish exactly; ``pumping_fn`` is injectable for fault drills."""
    fn = pumping_fn or _pumping_from_means
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        d, k = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        a = fn(rng.standard_normal((d, k)), rng.standard_normal((d, k)))
        worst = max(worst, float(np.max(np.abs(a + a.T))))
    return worst == 0.0, f"max |A + A^T| = {worst:.2e} over 1000 random states (tol 0)"


def check_pumping_rates_conserve() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 7))
        raw = rng.random(k)
        w = WeightVector(raw / raw.sum())
        m = rng.standard_normal((k, k))
        worst = max(worst, abs(pumping_rates(w, PumpingMatrix(m - m.T), 1.5).sum()))
    return worst <= 1e-12, f"max |sum dw/dt| = {worst:.2e} (tol 1e-12)"


def check_no_heating_random() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    n, k = 16, 2
    grid = Grid(n, -6.0, 6.0)
    space = DetectorSpace([DetectorModel(grid, InvertedOscillator())])
    blocks = np.empty((k, k, n, n), dtype=complex)
    for i in range(k):
        h = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        blocks[i, i] = h @ h.conj().T
        blocks[i, i] /= np.trace(blocks[i, i]).real
    m01 = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    blocks[0, 1] = m01
    blocks[1, 0] = m01.conj().T
    st = SystemState(np.array([np.sqrt(0.5), np.sqrt(0.5)], dtype=complex), blocks,
                     [BranchLabel(0, (True,)), BranchLabel(1, (False,))], space, 0.7)
    val = no_heating_check(st)
    return val <= 1e-12, f"|i zeta Tr[(x rho p - p rho x) rho]| = {val:.2e} (tol 1e-12)"


def check_linear_limit() -> tuple[bool, str]:
    state, _, _ = _two_branch_instance(zeta=0.0)
    _, rec = run_trajectory(state, 0.01, 300)
    dev = float(np.max(np.abs(rec.weights - rec.weights[0])))
    return dev <= 1e-9, f"zeta=0 max weight change {dev:.2e} (tol 1e-9)"


def check_weight_conservation() -> tuple[bool, str]:
    state, _, _ = _two_branch_instance(zeta=0.15)
    final, rec = run_trajectory(state, 0.01, 400)
    err = rec.max_conservation_error
    pairing = hermitian_pairing_defect(final)
    ok = err <= 1e-9 and pairing <= 1e-9
    return ok, f"|sum w - 1| = {err:.2e}, pairing defect {pairing:.2e} (tol 1e-9)"


def check_ruin_sum_preservation() -> tuple[bool, str]:
    res = run_batch([0.3, 0.7], NoiseSpec("gaussian"), 200, master_seed=12)
    ok = res.max_sum_error <= 1e-12 and res.revival_violations == 0
    return ok, (f"max |sum w - 1| = {res.max_sum_error:.2e} (tol 1e-12), "
                f"revivals {res.revival_violations}")


def check_ruin_determinism() -> tuple[bool, str]:
    a = run_batch([0.3, 0.7], NoiseSpec("gaussian"), 100, master_seed=5)
    b = run_batch([0.3, 0.7], NoiseSpec("gaussian"), 100, master_seed=5)
    ok = np.array_equal(a.winners, b.winners) and np.array_equal(a.steps, b.steps)
    return ok, "identical winners and step counts on rerun" if ok else "rerun diverged"


def check_martingale_fair() -> tuple[bool, str]:
    rep = martingale_diagnostic([0.3, 0.7], NoiseSpec("gaussian"), trials=2000,
                                master_seed=6, horizon_steps=1000, snapshot_every=200)
    ok = not rep.flagged
    return ok, f"max drift {rep.max_deviation_sigma:.2f} sigma (flag at {rep.flag_threshold})"


def check_product_full_equivalence() -> tuple[bool, str]:
    grid = Grid(8, -10.0, 10.0)
    models = [DetectorModel(grid, InvertedOscillator(0.4, 0.05)) for _ in range(2)]
    labels = [BranchLabel(0, (True, False)), BranchLabel(1, (False, True))]
    hit_a = gaussian_packet(grid, 0.1, 0.6, 1.3)
    quiet_a = gaussian_packet(grid, -0.05, 0.0, 1.3)
    hit_b = gaussian_packet(grid, -0.1, 0.6, 1.3)
    quiet_b = gaussian_packet(grid, 0.07, 0.0, 1.3)
    c = [np.sqrt(0.45), np.sqrt(0.55)]
    states = [[hit_a, quiet_b], [quiet_a, hit_b]]
    product = assemble_product_state(c, labels, states, models, 0.05)
    full = assemble_initial_state(c, labels, states, DetectorSpace(models), 0.05)
    pf, prec = run_product_trajectory(product, 0.01, 150)
    ff, frec = run_trajectory(full, 0.01, 150)
    rel = float(np.max(np.abs(prec.weights - frec.weights) /
                       np.maximum(frec.weights, 1e-30)))
    # factorized rate law at the final state
    w = reconstruct_global_weights(pf.c, local_weights(pf), pf.live)
    from .dynamics_product import assemble_full_from_product
    a = pumping_coefficients(assemble_full_from_product(pf, ff.space))
    global_rates = pumping_rates(w, a, pf.zeta) / w.w
    local_sum = local_weight_rates(pf).sum(axis=0)
    law = float(np.max(np.abs(global_rates - local_sum)))
    ok = rel <= 1e-6 and law <= 1e-10
    return ok, f"trajectory rel diff {rel:.2e} (tol 1e-6), rate law {law:.2e} (tol 1e-10)"


def check_oracle_equivalence() -> tuple[bool, str]:
    """Production integrator versus a self-contained dense RK4 reference."""
    zeta, dt, steps = 0.1, 0.005, 400
    state, model, (hit, quiet) = _two_branch_instance(zeta=zeta)
    grid = model.grid
    final, _ = run_trajectory(state, dt, steps)
    w_prod = _raw_weights(final)

    n = grid.n_points
    c = np.array([np.sqrt(0.4), np.sqrt(0.6)], dtype=complex)
    rho = np.zeros((2 * n, 2 * n), dtype=complex)
    phi = [hit, quiet]
    for k in range(2):
        for l in range(2):
            rho[k * n:(k + 1) * n, l * n:(l + 1) * n] = \
                c[k] * np.conj(c[l]) * np.outer(phi[k], phi[l].conj())
    x_full = np.kron(np.eye(2), np.diag(grid.points.astype(complex)))
    p_full = np.kron(np.eye(2), model.momentum_operator().matrix)
    h_lin = np.kron(np.eye(2), model.hamiltonian().matrix)

    def deriv(r):
        h = h_lin + 1j * zeta * (x_full @ r @ p_full - p_full @ r @ x_full)
        return -1j * (h @ r - r @ h)

    ref_dt = dt / 10.0
    for _ in range(steps * 10):
        k1 = deriv(rho)
        k2 = deriv(rho + 0.5 * ref_dt * k1)
        k3 = deriv(rho + 0.5 * ref_dt * k2)
        k4 = deriv(rho + ref_dt * k3)
        rho = rho + (ref_dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    w_ref = np.array([np.trace(rho[k * n:(k + 1) * n, k * n:(k + 1) * n]).real
                      for k in range(2)])
    rel = float(np.max(np.abs(w_prod - w_ref) / np.abs(w_ref)))
    return rel <= 1e-6, f"weights rel diff {rel:.2e} vs 10x-finer reference (tol 1e-6)"


def check_replay_consistency() -> tuple[bool, str]:
    grid = Grid(48, -12.0, 12.0)
    model = DetectorModel(grid, BiasedDoubleWell(1.5, 0.35, 3.0))
    space = DetectorSpace([model])
    labels = [BranchLabel(0, (True,)), BranchLabel(1, (False,))]
    hit = gaussian_packet(grid, 3.0, -1.5, 0.7)
    quiet = gaussian_packet(grid, 3.05, 0.0, 0.7)
    zeta, dt, eps = 1.2, 0.003, 0.01
    st = assemble_initial_state([np.sqrt(0.5), np.sqrt(0.5)], labels,
                                [[hit], [quiet]], space, zeta)
    final, rec = run_trajectory(st, dt, 1500, record_pumping=True,
                                stop_on_collapse=True, epsilon=eps)
    from .dynamics_full import detect_collapse
    winner = detect_collapse(_raw_weights(final), eps)
    if winner is None:
        return False, "full dynamics did not collapse"
    replay = ReplayNoise(rec.dts, rec.pumping[:-1])
    res = run_to_collapse(rec.weights[0] / rec.weights[0].sum(), replay, zeta=zeta,
                          dt=dt, max_steps=len(rec.dts) + 10, epsilon=eps)
    ok = res.winner == winner
    return ok, f"full-dynamics winner {winner}, replayed winner {res.winner}"


FAST_CHECKS = [
    ("operator-hermiticity", check_operator_hermiticity),
    ("anticommutator-identity", check_anticommutator_identity),
    ("mean-value-scaling", check_mean_value_scaling),
    ("pumping-antisymmetry", check_pumping_antisymmetry),
    ("pumping-rates-conserve", check_pumping_rates_conserve),
    ("no-heating-random", check_no_heating_random),
    ("linear-limit", check_linear_limit),
    ("weight-conservation", check_weight_conservation),
    ("ruin-sum-preservation", check_ruin_sum_preservation),
    ("ruin-determinism", check_ruin_determinism),
    ("martingale-fair", check_martingale_fair),
]

FULL_CHECKS = FAST_CHECKS + [
    ("product-full-equivalence", check_product_full_equivalence),
    ("oracle-equivalence", check_oracle_equivalence),
    ("replay-consistency", check_replay_consistency),
]


def run_suite(level: str = "fast", out=print) -> bool:
    """Run the invariant suite, print one line per check, return overall pass."""
    checks = FAST_CHECKS if level == "fast" else FULL_CHECKS
    all_ok = True
    for name, fn in checks:
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name:26s} {detail}  ({time.time() - t0:.1f}s)")
    return all_ok