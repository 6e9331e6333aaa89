"""Command-line entry point: train, eval, ablate, bench.

Every command reads one TOML config (or a previous run's manifest.json
to reproduce it), writes its artifacts into a fresh run directory named
by timestamp and config hash, and records a manifest with everything
needed to reproduce the run. Exit codes: 0 success, 2 configuration or
schema error, 3 numeric abort (checkpoint retained).
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import platform
import sys
import time

OUT_DIR_ENV = "STEINPINN_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="steinpinn",
        description="Train and study Gaussian-smoothed PDE solvers driven by "
        "Stein derivative estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML config (or a manifest.json to rerun)")
        p.add_argument("--out", default=None, help=f"output root (default: runs/, env {OUT_DIR_ENV})")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (1 = bit-reproducible)")

    common(sub.add_parser("train", help="run one training job"))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on hold-out points")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint.npz from a training run")
    p_eval.add_argument("--points", type=int, default=None, help="hold-out sample count")

    p_abl = sub.add_parser("ablate", help="run an ablation study")
    common(p_abl)
    p_abl.add_argument("--study", required=True, help="estimators | sigma | samples")

    common(sub.add_parser("bench", help="time stein vs exact-stacked loss evaluation"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _load_settings(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if settings.threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=settings.threads)

    out_root = args.out or os.environ.get(OUT_DIR_ENV) or "runs"
    handler = {
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "bench": cmd_bench,
    }[args.command]
    try:
        return handler(args, settings, out_root)
    except _ConfigFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


class _ConfigFailure(Exception):
    pass


def _load_settings(args):
    from . import config as config_mod

    cfg = config_mod.load_config_file(args.config)
    return config_mod.build_settings(cfg, seed_override=args.seed, threads_override=args.threads)


def _make_run_dir(out_root, command, settings):
    from . import config as config_mod

    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%d-%H%M%S")
    digest = config_mod.config_hash(settings.raw)[:12]
    run_dir = os.path.join(out_root, f"{command}-{stamp}-{digest}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir, digest


def _manifest(command, settings, digest, artifacts, started, extra=None):
    from . import __version__

    body = {
        "schema_version": 1,
        "package_version": __version__,
        "command": command,
        "config": settings.raw,
        "config_sha256": digest,
        "seed": settings.seed,
        "threads": settings.threads,
        "started_utc": started,
        "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "host": {"platform": platform.platform(), "cpus": os.cpu_count()},
        "artifacts": artifacts,
    }
    if extra:
        body.update(extra)
    return body


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_loss_csv(path, report):
    """Deterministic per-iteration loss curve (no wall-clock columns)."""
    term_names = sorted(report.rows[0].terms) if report.rows else []
    lines = ["iteration,learning_rate,loss_total," + ",".join(f"loss_{t}" for t in term_names)]
    for row in report.rows:
        cells = [str(row.iteration), repr(row.learning_rate), repr(row.loss)]
        cells += [repr(row.terms[t]) for t in term_names]
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")


def cmd_train(args, settings, out_root) -> int:
    from . import training

    run_dir, digest = _make_run_dir(out_root, "train", settings)
    started = _now()
    params, report = training.train(
        settings.problem, settings.network, settings.training, checkpoint_dir=run_dir
    )
    report.config_echo = settings.raw
    _write_json(os.path.join(run_dir, "report.json"), report.to_dict())
    write_loss_csv(os.path.join(run_dir, "loss.csv"), report)
    artifacts = {
        "report": "report.json",
        "loss_curve": "loss.csv",
        "checkpoint": "checkpoint.npz",
        "manifest": "manifest.json",
    }
    manifest = _manifest("train", settings, digest, artifacts, started,
                         extra={"aborted": report.aborted, "abort_reason": report.abort_reason})
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    if report.aborted:
        print(f"aborted: {report.abort_reason} (checkpoint retained in {run_dir})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"run dir: {run_dir}")
    print(f"final loss: {report.rows[-1].loss:.6g}")
    print(f"L1 relative error: {report.final_l1:.6g}")
    print(f"L2 relative error: {report.final_l2:.6g}")
    return EXIT_OK


def cmd_eval(args, settings, out_root) -> int:
    from . import evaluation, training
    from .errors import ConfigError

    try:
        spec, params, _, iteration = training.load_checkpoint(args.checkpoint)
    except ConfigError as exc:
        raise _ConfigFailure(str(exc))
    if spec != settings.network:
        raise _ConfigFailure(
            f"checkpoint architecture {spec.layer_widths} does not match "
            f"config network {settings.network.layer_widths}"
        )
    run_dir, digest = _make_run_dir(out_root, "eval", settings)
    started = _now()
    num_points = args.points
    if num_points is None:
        num_points = settings.training.eval_points
    if num_points is None:
        num_points = training.EVAL_POINTS_DEFAULT[settings.problem.name]
    from .estimators import substream_seed

    err = evaluation.relative_errors(
        evaluation.model_handle(params, settings.smoothing),
        settings.problem,
        eval_seed=substream_seed(settings.seed, 4),
        num_points=num_points,
        eval_samples=settings.training.eval_samples,
        reference_samples=settings.training.reference_samples,
    )
    payload = {"schema_version": 1, "checkpoint_iteration": iteration, **err.to_dict()}
    _write_json(os.path.join(run_dir, "error.json"), payload)
    manifest = _manifest("eval", settings, digest,
                         {"error_report": "error.json", "manifest": "manifest.json"}, started)
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_ablate(args, settings, out_root) -> int:
    from . import benchmarks, evaluation
    from .network import init_params, mlp_spec

    study = args.study
    if study not in ("estimators", "sigma", "samples"):
        raise _ConfigFailure(f"unknown study {study!r}; expected estimators|sigma|samples")
    run_dir, digest = _make_run_dir(out_root, f"ablate-{study}", settings)
    started = _now()
    summary = {"schema_version": 1, "study": study}
    if study == "estimators":
        st = settings.study
        base = evaluation.NetworkBase(
            init_params(mlp_spec(st.dim, layers=st.layers, hidden_dim=st.width), seed=settings.seed)
        )
        rows = evaluation.estimator_error_study(
            base,
            k_grid=st.k_grid,
            seed=settings.seed,
            num_points=st.num_points,
            sigma=st.sigma,
            oracle="samples",
            oracle_samples=st.oracle_samples,
            oracle_var_target=st.oracle_var_target,
        )
        benchmarks.write_study_csv(os.path.join(run_dir, "estimator_study.csv"), rows)
        artifacts = {"study_csv": "estimator_study.csv"}
        summary["rows"] = len(rows)
    else:
        if study == "sigma":
            rows = benchmarks.ablation_sigma(
                settings.problem, settings.network, settings.training, settings.ablation.sigma_grid
            )
        else:
            rows = benchmarks.ablation_samples(
                settings.problem, settings.network, settings.training, settings.ablation.samples_grid
            )
        benchmarks.write_ablation_csv(os.path.join(run_dir, f"{study}_ablation.csv"), rows)
        artifacts = {"ablation_csv": f"{study}_ablation.csv"}
        summary["rows"] = [
            {
                "value": r.value,
                "l1_relative": r.l1_relative,
                "l2_relative": r.l2_relative,
                "train_seconds": r.train_seconds,
            }
            for r in rows
        ]
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    artifacts["summary"] = "summary.json"
    artifacts["manifest"] = "manifest.json"
    _write_json(os.path.join(run_dir, "manifest.json"),
                _manifest(f"ablate-{study}", settings, digest, artifacts, started))
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_bench(args, settings, out_root) -> int:
    from . import benchmarks

    run_dir, digest = _make_run_dir(out_root, "bench", settings)
    started = _now()
    b = settings.bench
    rows = benchmarks.timing_benchmark(
        dims=b.dims,
        width=b.width,
        samples=b.samples,
        num_points=b.num_points,
        replicates=b.replicates,
        seed=settings.seed,
        threads=b.threads,
    )
    benchmarks.write_timing_csv(os.path.join(run_dir, "timing.csv"), rows)
    growth = benchmarks.growth_factors(rows)
    summary = {"schema_version": 1, "growth_factors": growth}
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    _write_json(os.path.join(run_dir, "manifest.json"),
                _manifest("bench", settings, digest,
                          {"timing_csv": "timing.csv", "summary": "summary.json",
                           "manifest": "manifest.json"}, started))
    print(f"run dir: {run_dir}")
    for row in rows:
        print(f"{row.method:14s} d={row.dimension:5d}  {row.seconds * 1e3:10.2f} ms")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
