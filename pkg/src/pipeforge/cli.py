"""Command line entry points: run, resume, worker, report and bench.

Exit codes: 0 success, 2 invalid config or arguments, 3 runtime failure,
4 run-directory (store) failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from pipeforge.config import ExperimentConfig, ParseError, ValidationError, config_from_dict, load_config
from pipeforge.data import EmptyDataset, SchemaError
from pipeforge.store import RunStore, StoreError

logger = logging.getLogger("pipeforge")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_STORE = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _apply_overrides(cfg: ExperimentConfig, seed: int | None, workers: int | None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        if seed < 0:
            raise ValidationError("seed", "must be unsigned")
        changes["seed"] = seed
    if workers is not None:
        if workers < 1:
            raise ValidationError("workers", "must be positive")
        changes["num_workers"] = workers
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _short_summary(report: dict) -> dict:
    best = report.get("best") or {}
    return {"status": report["status"], "completed": report["completed"], "budget": report["budget"],
            "best_weighted_error": best.get("weighted_error"), "best_pipeline": best.get("pipeline"),
            "hypervolume": report.get("hypervolume")}


# -- commands ----------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    from pipeforge.coordinator import run_experiment

    cfg = _apply_overrides(load_config(args.config), args.seed, args.workers)
    out = args.out or os.path.join("runs", cfg.config_hash())
    if RunStore(out).exists():
        logger.warning("%s already holds a run; resuming it", out)
    report = run_experiment(cfg, out, mode=args.mode, workers=args.workers, listen=args.listen,
                            redelivery_timeout=args.redelivery_timeout)
    _print_json(_short_summary(report))
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    from pipeforge.coordinator import run_experiment

    meta = RunStore(args.out).read_config()
    cfg = _apply_overrides(config_from_dict(meta["config"]), None, args.workers)
    report = run_experiment(cfg, args.out, mode=args.mode, workers=args.workers, listen=args.listen,
                            redelivery_timeout=args.redelivery_timeout)
    _print_json(_short_summary(report))
    return EXIT_OK


def cmd_worker(args: argparse.Namespace) -> int:
    from pipeforge.transport.tcp import run_tcp_worker

    if not Path(args.data).is_file():
        raise UsageError(f"--data {args.data}: no such file")
    n = run_tcp_worker(args.connect, args.data, worker_id=args.worker_id, give_up_after=args.give_up_after)
    logger.info("worker finished after %d tasks", n)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    store = RunStore(args.run)
    store.read_config()
    if args.progress:
        rows = store.load_progress()
        writer = csv.writer(sys.stdout)
        writer.writerow(("timestamp", "completed", "global_best_error", "hypervolume"))
        for r in rows:
            writer.writerow((r["timestamp"], r["completed"], r["global_best_error"], r["hypervolume"]))
        return EXIT_OK
    report = store.load_report()
    if report is None:
        from pipeforge.coordinator import load_run

        report = load_run(args.run).final_report(finished=False)
    if args.pareto:
        _print_json({"status": report["status"], "objectives": report["objectives"],
                     "pareto_front": report["pareto_front"]})
        return EXIT_OK
    _print_json({k: report[k] for k in ("status", "run_id", "budget", "completed", "objectives", "weights",
                                        "best", "pareto_front", "hypervolume", "lp_stats")})
    if args.table:
        _print_lp_table(report)
    return EXIT_OK


def _print_lp_table(report: dict) -> None:
    rows = sorted(report["lp_stats"], key=lambda r: -(r["score"] if r["score"] is not None else -1e9))
    print(f"{'logical pipeline':<44} {'status':<10} {'done':>5} {'score':>8} {'cost':>9}", file=sys.stderr)
    for r in rows:
        score = "-" if r["score"] is None else f"{r['score']:.4f}"
        print(f"{' -> '.join(r['stages']):<44} {r['status']:<10} {r['completed']:>5} {score:>8} {r['cost']:>9.4f}",
              file=sys.stderr)


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def bench_once(cfg: ExperimentConfig, workers: int, out_dir: str) -> float:
    """Wall time of one tcp-mode run served by ``workers`` worker processes."""
    from pipeforge.coordinator import run_experiment

    addr = f"127.0.0.1:{_free_port()}"
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    procs = []
    start = time.perf_counter()
    try:
        for _ in range(workers):
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "pipeforge.cli", "worker", "--connect", addr, "--data", cfg.dataset_path,
                 "--give-up-after", "60"],
                env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL))
        run_experiment(cfg, out_dir, mode="tcp", listen=addr)
        elapsed = time.perf_counter() - start
    finally:
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
    return elapsed


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    counts = [int(x) for x in args.workers_list.split(",") if x.strip()]
    if not counts or any(c < 1 for c in counts):
        raise UsageError("--workers-list needs positive integers")
    root = Path(args.out or tempfile.mkdtemp(prefix="pipeforge-bench-"))
    results = []
    for w in counts:
        run_cfg = dataclasses.replace(cfg, max_total_pipelines_num=args.pipelines, num_workers=w,
                                      queue_size=max(cfg.queue_size, 2 * w, cfg.num_pp_candidates),
                                      cost_measure="work_units")
        out = root / f"workers-{w}"
        if out.exists():
            raise UsageError(f"{out} already exists; pass a fresh --out")
        t = bench_once(run_cfg, w, str(out))
        results.append({"workers": w, "runtime_seconds": t})
        logger.info("workers=%d runtime=%.2fs", w, t)
    base = next((r["runtime_seconds"] for r in results if r["workers"] == 1), None)
    for r in results:
        r["speedup"] = None if base is None else base / r["runtime_seconds"]
    print(f"{'workers':>8} {'runtime_s':>10} {'speedup':>8}", file=sys.stderr)
    for r in results:
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.2f}"
        print(f"{r['workers']:>8} {r['runtime_seconds']:>10.2f} {sp:>8}", file=sys.stderr)
    _print_json({"pipelines": args.pipelines, "results": results, "cpu_count": os.cpu_count()})
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipeforge", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_exec_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--workers", type=int, help="number of workers (default: config num_workers)")
        p.add_argument("--mode", choices=("inproc", "tcp"), default="inproc")
        p.add_argument("--listen", default="127.0.0.1:7457", help="HOST:PORT for --mode tcp")
        p.add_argument("--redelivery-timeout", type=float, default=None,
                       help="seconds of worker silence before its task is redelivered (default 60)")

    p = sub.add_parser("run", parents=[common], help="run an experiment to its budget")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (default runs/<config hash>)")
    p.add_argument("--seed", type=int)
    add_exec_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", parents=[common], help="continue an interrupted run")
    p.add_argument("--out", required=True, help="run directory")
    add_exec_flags(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("worker", parents=[common], help="serve tasks for a tcp-mode coordinator")
    p.add_argument("--connect", required=True, help="coordinator HOST:PORT")
    p.add_argument("--data", required=True, help="path to the dataset CSV")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; tasks carry their own seeds")
    p.add_argument("--worker-id")
    p.add_argument("--give-up-after", type=float, default=600.0,
                   help="exit after this many seconds without reaching the coordinator")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("report", parents=[common], help="print the report of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--pareto", action="store_true", help="only the non-dominated observations")
    p.add_argument("--progress", action="store_true", help="progress time series as CSV")
    p.add_argument("--table", action="store_true", help="also print a per-pipeline table to stderr")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", parents=[common], help="runtime and speedup for several worker counts")
    p.add_argument("--config", required=True)
    p.add_argument("--workers-list", default="1,2,4,8")
    p.add_argument("--pipelines", type=int, default=200)
    p.add_argument("--out", help="directory for the per-count run directories")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (ParseError, ValidationError, UsageError, SchemaError, EmptyDataset) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StoreError as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return EXIT_STORE
    except KeyboardInterrupt:
        print("interrupted; resume with `pipeforge resume --out DIR`", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
