"""Compiled per-row engine for the batched pumping game.

Each trial owns a buffered noise stream; rows are advanced independently to
collapse (or a snapshot horizon), pausing only when a buffer runs low so the
caller can refill it from the trial's numpy generator.  The float operations
mirror the pure-python reference path op for op (same pair accumulation
order, same precomputed per-depth factors), so jitted and fallback runs
produce identical trajectories.

Conventions shared with ruin.py:
  kind 0 = gaussian white (buffer holds standard normals),
  kind 1 = telegraph (buffer holds uniforms; ``signs`` is the flip state).
  factors[d] = per-draw gain scale at subdivision depth d,
  flip_thr[d] = telegraph flip probability for a depth-d subinterval.
Status codes per row: 0 running, 1 collapsed, 2 timed out.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


RESERVE_FACTOR = 256  # draws to keep in reserve per step (covers depth ~7 trees)
MAX_DEPTH = 60


@njit(cache=True)
def _run_rows(kind, w, live, status, steps, buf, pos, width, signs,
              iu_i, iu_j, factors, flip_thr, bias, has_bias,
              cap, epsilon, zeta_dt_bias, max_steps, stop_at_collapse,
              snap_cadence, snap_sums, snap_sq, need_refill, stats):
    n_rows, k = w.shape
    n_pairs = iu_i.shape[0]
    reserve = RESERVE_FACTOR * n_pairs
    g = np.empty(k)
    stack = np.empty(MAX_DEPTH + 2, dtype=np.int64)
    for i in range(n_rows):
        if status[i] != 0 or need_refill[i]:
            continue
        while True:
            if steps[i] >= max_steps:
                status[i] = 2
                break
            alive = 0
            for kk in range(k):
                if live[i, kk]:
                    alive += 1
            if stop_at_collapse and alive <= 1:
                status[i] = 1
                break
            if pos[i] + reserve > width:
                need_refill[i] = True
                break
            # one noise interval, depth-first subdivision via explicit stack
            depth = 0
            stack[0] = 1
            failed = False
            while depth >= 0:
                if stack[depth] == 0:
                    depth -= 1
                    continue
                stack[depth] -= 1
                for kk in range(k):
                    g[kk] = 0.0
                if kind == 0:
                    f = factors[depth]
                    for p in range(n_pairs):
                        v = buf[i, pos[i]] * f
                        pos[i] += 1
                        g[iu_i[p]] += v * w[i, iu_j[p]]
                        g[iu_j[p]] -= v * w[i, iu_i[p]]
                else:
                    f = factors[depth]
                    for p in range(n_pairs):
                        v = signs[i, p] * f
                        g[iu_i[p]] += v * w[i, iu_j[p]]
                        g[iu_j[p]] -= v * w[i, iu_i[p]]
                if has_bias:
                    zb = zeta_dt_bias[depth]
                    for kk in range(k):
                        acc = 0.0
                        for mm in range(k):
                            acc += bias[kk, mm] * w[i, mm]
                        g[kk] += zb * acc
                if kind == 1:
                    thr = flip_thr[depth]
                    for p in range(n_pairs):
                        u = buf[i, pos[i]]
                        pos[i] += 1
                        if u < thr:
                            signs[i, p] = -signs[i, p]
                gmax = 0.0
                for kk in range(k):
                    if live[i, kk]:
                        a = abs(g[kk])
                        if a > gmax:
                            gmax = a
                if gmax <= cap:
                    for kk in range(k):
                        w[i, kk] += w[i, kk] * g[kk]
                else:
                    if depth + 1 > MAX_DEPTH:
                        status[i] = 3
                        failed = True
                        break
                    depth += 1
                    stack[depth] = 2
            if failed:
                break
            steps[i] += 1
            # absorption and proportional redistribution
            newly = False
            alive = 0
            for kk in range(k):
                if live[i, kk]:
                    if w[i, kk] < epsilon:
                        newly = True
                    else:
                        alive += 1
            if newly and alive > 0:
                total = 0.0
                for kk in range(k):
                    if live[i, kk] and w[i, kk] < epsilon:
                        live[i, kk] = False
                        w[i, kk] = 0.0
                for kk in range(k):
                    total += w[i, kk]
                if total > 0.0:
                    for kk in range(k):
                        w[i, kk] /= total
            total = 0.0
            for kk in range(k):
                total += w[i, kk]
            err = abs(total - 1.0)
            if err > stats[0]:
                stats[0] = err
            for kk in range(k):
                if not live[i, kk] and w[i, kk] != 0.0:
                    stats[1] += 1.0
            if snap_cadence > 0 and steps[i] % snap_cadence == 0:
                idx = steps[i] // snap_cadence
                if idx < snap_sums.shape[0]:
                    for kk in range(k):
                        snap_sums[idx, kk] += w[i, kk]
                        snap_sq[idx, kk] += w[i, kk] * w[i, kk]
    return 0


def run_rows(**kwargs):
    return _run_rows(**kwargs)
