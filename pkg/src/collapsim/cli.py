"""Command-line interface: run scenarios, validate invariants, dump traces.

Exit codes: 0 success, 1 malformed configuration, 2 invariant violation
during the run, 3 timeout-rate failure.  Bulk data is CSV, summaries and
manifests are JSON; floats are serialized with 17 significant digits so
reruns with the same (config, seed, version) are byte-identical.  Output
files are written via temp-then-rename, never partially.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone

import numpy as np

from .dynamics_full import IntegrationDiverged, StepSizeUnderflow
from .ruin import ReplayNoise, _wilson
from .scenarios import (
    ConfigError,
    ScenarioConfig,
    TimeoutRateExceeded,
    config_from_dict,
    config_to_dict,
    run_scenario,
)
from .validate import run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_TIMEOUT = 3

THREADS_ENV = "COLLAPSIM_THREADS"
RUIN_SUM_TOL = 1e-12
DYNAMICAL_SUM_TOL = 1e-9


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}")


def _config_hash(config: ScenarioConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _safe_label(label: str) -> str:
    return label.replace("'", "p").replace(",", "_").replace(" ", "")


def _trial_csv(result) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial", "seed", "winner", "steps"])
    for t, (seed, winner, steps) in enumerate(zip(result.seeds, result.winners,
                                                  result.steps)):
        writer.writerow([t, int(seed), int(winner), int(steps)])
    return buf.getvalue()


def _summary_doc(report, config: ScenarioConfig) -> dict:
    settings = []
    for r in report.results:
        lo, hi = _wilson(r.counts.astype(float), r.trials)
        entry = {
            "label": r.label,
            "setting": r.setting,
            "trials": r.trials,
            "timeouts": r.timeouts,
            "weights": [_fmt(np.abs(c) ** 2) for c in r.amplitudes],
            "counts": [int(c) for c in r.counts],
            "frequencies": [_fmt(f) for f in r.frequencies],
            "wilson_low": [_fmt(v) for v in lo],
            "wilson_high": [_fmt(v) for v in hi],
        }
        if r.correlator is not None:
            entry["correlator"] = _fmt(r.correlator)
            entry["correlator_sigma"] = _fmt(r.correlator_sigma)
        settings.append(entry)
    doc = {
        "kind": report.kind,
        "engine": report.engine,
        "master_seed": report.master_seed,
        "settings": settings,
    }
    if report.chsh is not None:
        doc["chsh"] = {"S": _fmt(report.chsh), "sigma": _fmt(report.chsh_sigma)}
    return doc


def _run_invariants(report, config: ScenarioConfig) -> dict:
    """Post-run invariant summary recorded in the manifest."""
    tol = RUIN_SUM_TOL if config.engine == "ruin" else DYNAMICAL_SUM_TOL
    worst_sum = max((r.max_sum_error for r in report.results), default=0.0)
    violations = sum(r.revival_violations for r in report.results)
    return {
        "weight_conservation": {"max_error": _fmt(worst_sum), "tolerance": _fmt(tol),
                                "ok": bool(worst_sum <= tol)},
        "monotone_ruin": {"violations": violations, "ok": violations == 0},
        "timeout_rate": {
            "timeouts": int(sum(r.timeouts for r in report.results)),
            "trials": int(sum(r.trials for r in report.results)),
            "ok": True,
        },
    }


def cmd_run(args) -> int:
    try:
        config = _load_config(args.config)
        if args.seed is not None:
            config.master_seed = args.seed
        if args.trials is not None:
            config.trials = args.trials
        if args.engine is not None:
            config = config_from_dict({**config_to_dict(config), "engine": args.engine})
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads or int(os.environ.get(THREADS_ENV, "1"))
    os.makedirs(args.out, exist_ok=True)
    started = _utcnow()
    t0 = time.time()
    try:
        report = run_scenario(config, threads=threads)
    except TimeoutRateExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (IntegrationDiverged, StepSizeUnderflow) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.time() - t0

    artifacts = {}
    for r in report.results:
        name = f"trials_{_safe_label(r.label)}.csv"
        _atomic_write(os.path.join(args.out, name), _trial_csv(r))
        artifacts[r.label] = name
    summary = _summary_doc(report, config)
    _atomic_write(os.path.join(args.out, "summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
    invariants = _run_invariants(report, config)
    manifest = {
        "schema_version": 1,
        "config_hash": _config_hash(config),
        "config": config_to_dict(config),
        "master_seed": config.master_seed,
        "engine": config.engine,
        "threads": threads,
        "started": started,
        "finished": _utcnow(),
        "wall_seconds": _fmt(wall),
        "artifacts": {"summary": "summary.json", "trials": artifacts},
        "invariants": invariants,
        "versions": {"numpy": np.__version__},
    }
    _atomic_write(os.path.join(args.out, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if not all(c.get("ok", True) for c in invariants.values()):
        print("invariant violation recorded in manifest", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_validate(args) -> int:
    ok = run_suite(args.level)
    return EXIT_OK if ok else EXIT_INVARIANT


def _trace_rows_full(config: ScenarioConfig):
    from .scenarios import _setting_runs, _stream_tag, _sample_branch_states, _hit_pattern
    from .dynamics_full import (BranchLabel, DetectorSpace, assemble_initial_state,
                                run_trajectory)
    from .ruin import trial_seed_sequence

    label, setting, amps, n_particles = _setting_runs(config)[0]
    tag = _stream_tag(config, label, setting)
    k = len(amps)
    if n_particles:
        n_det = 2 * n_particles
        labels = [BranchLabel(i, _hit_pattern(i, n_particles)) for i in range(k)]
    elif config.sg_layout == "threshold":
        n_det = 1
        labels = [BranchLabel(0, (True,)), BranchLabel(1, (False,))]
    else:
        n_det = k
        labels = [BranchLabel(i, tuple(j == i for j in range(k))) for i in range(k)]
    models = [config.detector.build_model() for _ in range(n_det)]
    rng = np.random.Generator(np.random.PCG64(trial_seed_sequence(config.master_seed, tag, 0)))
    branch_states = _sample_branch_states(labels, models, config.detector, rng)
    if config.engine == "full":
        space = DetectorSpace(models)
        state = assemble_initial_state(amps, labels, branch_states, space, config.zeta)
        final, rec = run_trajectory(state, config.dt, config.max_steps,
                                    epsilon=config.epsilon, record_noheat=True,
                                    record_pumping=True, stop_on_collapse=True)
        return rec.times, rec.dts, rec.weights, rec.pumping, rec.noheat_rel, rec.live, None
    from .dynamics_product import assemble_product_state, run_product_trajectory
    state = assemble_product_state(amps, labels, branch_states, models, config.zeta)
    final, rec = run_product_trajectory(state, config.dt, config.max_steps,
                                        epsilon=config.epsilon, record_locals=True,
                                        record_noheat=True, stop_on_collapse=True)
    # pumping matrices assembled from the recorded local means
    steps = len(rec.times)
    k = rec.weights.shape[1]
    pump = np.zeros((steps, k, k))
    for i in range(steps):
        a = np.zeros((k, k))
        for d in range(rec.local_x.shape[1]):
            xs = rec.local_x[i, d]
            ps = rec.local_p[i, d]
            a += 2.0 * (np.outer(xs, ps) - np.outer(ps, xs))
        pump[i] = a
    detector_rows = (rec.times, rec.local_w, rec.local_x, rec.local_p)
    return rec.times, rec.dts, rec.weights, pump, rec.noheat_rel, rec.live, detector_rows


def cmd_trace(args) -> int:
    try:
        config = _load_config(args.config)
        if args.seed is not None:
            config.master_seed = args.seed
        if config.engine not in ("full", "product"):
            raise ConfigError("trace needs the full or product engine")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    try:
        times, dts, weights, pump, noheat, live, detector_rows = _trace_rows_full(config)
    except (IntegrationDiverged, StepSizeUnderflow) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    k = weights.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    header = (["step", "t", "dt"] + [f"w_{i}" for i in range(k)]
              + [f"A_{i}_{j}" for i, j in pairs] + ["no_heating_rel", "live_mask"])
    writer.writerow(header)
    for n in range(len(times)):
        dt_n = dts[n - 1] if n > 0 else 0.0
        row = [n, _fmt(times[n]), _fmt(dt_n)]
        row += [_fmt(w) for w in weights[n]]
        row += [_fmt(pump[n][i, j]) for i, j in pairs]
        row += [_fmt(noheat[n]), "".join("1" if b else "0" for b in live[n])]
        writer.writerow(row)
    _atomic_write(os.path.join(args.out, "trace.csv"), buf.getvalue())
    if detector_rows is not None:
        t_arr, lw, lx, lp = detector_rows
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "t", "detector"] + [f"w_{i}" for i in range(k)]
                        + [f"x_{i}" for i in range(k)] + [f"p_{i}" for i in range(k)])
        for n in range(len(t_arr)):
            for d in range(lw.shape[1]):
                writer.writerow([n, _fmt(t_arr[n]), d]
                                + [_fmt(v) for v in lw[n, d]]
                                + [_fmt(v) for v in lx[n, d]]
                                + [_fmt(v) for v in lp[n, d]])
        _atomic_write(os.path.join(args.out, "detector_trace.csv"), buf.getvalue())
    return EXIT_OK


def load_trace_noise(path: str) -> tuple[ReplayNoise, np.ndarray, float]:
    """Rebuild replayable noise from a trace.csv; returns (noise, w0, zeta-less dt)."""
    with open(path) as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise ValueError(f"{path}: empty trace")
    k = sum(1 for key in rows[0] if key.startswith("w_"))
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    dts = np.array([float(r["dt"]) for r in rows[1:]])
    mats = np.zeros((len(rows) - 1, k, k))
    for n, r in enumerate(rows[:-1]):
        for i, j in pairs:
            v = float(r[f"A_{i}_{j}"])
            mats[n, i, j] = v
            mats[n, j, i] = -v
    w0 = np.array([float(rows[0][f"w_{i}"]) for i in range(k)])
    return ReplayNoise(dts, mats), w0 / w0.sum(), float(dts[0]) if len(dts) else 0.0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="collapsim",
        description="Nonlinear deterministic collapse model: scenario runner and "
                    "verification suite")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario config and write results")
    p_run.add_argument("--config", required=True, help="scenario JSON document")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, help="override master seed")
    p_run.add_argument("--trials", type=int, help="override trial count")
    p_run.add_argument("--engine", choices=["ruin", "full", "product"],
                       help="override execution engine")
    p_run.add_argument("--threads", type=int,
                       help=f"worker processes (default ${THREADS_ENV} or 1)")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="run the invariant suites")
    p_val.add_argument("--level", choices=["fast", "full"], default="fast")
    p_val.set_defaults(func=cmd_validate)

    p_tr = sub.add_parser("trace", help="dump one full/product trajectory as CSV")
    p_tr.add_argument("--config", required=True)
    p_tr.add_argument("--out", required=True)
    p_tr.add_argument("--seed", type=int, help="override master seed")
    p_tr.set_defaults(func=cmd_trace)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
