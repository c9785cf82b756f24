"""Experiment driver: run / plan / profile-sampler / gen-dataset.

Every run writes an append-only directory (timestamp + config hash) with
the resolved config snapshot, the per-iteration trace (JSON lines), a
summary CSV, the DRM decision log, a predicted-vs-simulated report, and a
final JSON summary. Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import perf
from .config import (ConfigError, build_graph, build_model, build_platform,
                     build_profile, build_runtime_config, config_hash, load_config)
from .graph import save_binary_csr
from .perf import SamplingProfile
from .runtime import PURE_SIM, TrainingSession
from .sampling import SamplerConfig, sample_minibatch


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _make_run_dir(cfg: dict, explicit: str | None) -> Path:
    if explicit:
        run_dir = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg["output"]["directory"]) / f"{stamp}-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _plan(cfg: dict):
    graph_unused = None  # planning needs no dataset, only shapes
    platform = build_platform(cfg)
    rt = build_runtime_config(cfg)
    profile = build_profile(cfg)
    dims = cfg["model"]["dims"]
    assignment = perf.initial_mapping(platform, rt.batch_size, rt.fanouts, dims,
                                      profile, rt.cpu_workers,
                                      granularity=rt.drm.granularity,
                                      s_feat=rt.s_feat, overhead=rt.overhead)
    shapes = perf.expected_shapes(assignment, rt.fanouts, dims)
    pred = perf.predict_iteration(platform, assignment, shapes, profile, dims,
                                  s_feat=rt.s_feat, overhead=rt.overhead)
    return assignment, pred


def cmd_plan(args) -> int:
    cfg = load_config(args.config, args.set or ())
    assignment, pred = _plan(cfg)
    print("initial mapping (targets per device):")
    for dev, size in assignment.batch_sizes.items():
        print(f"  {dev}: {size}")
    print("cpu workers:")
    for task, count in assignment.cpu_workers.items():
        print(f"  {task}: {count}")
    print("predicted stage times (s):")
    print(f"  T_samp  {pred.t_samp:.6e}")
    print(f"  T_load  {pred.t_load:.6e}")
    if pred.t_trans is not None:
        print(f"  T_trans {pred.t_trans:.6e}")
    print(f"  T_prop  {pred.t_prop:.6e}")
    print(f"  T_exec  {pred.t_execution:.6e}")
    print(f"predicted throughput: {pred.throughput_mteps:.3f} MTEPS")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or ())
    run_dir = _make_run_dir(cfg, args.run_dir)

    graph = build_graph(cfg)
    platform = build_platform(cfg)
    rt = build_runtime_config(cfg)
    profile = build_profile(cfg)
    model = build_model(cfg)
    dims = cfg["model"]["dims"]
    assignment, plan_pred = _plan(cfg)

    session = TrainingSession(graph, model, platform, rt, assignment=assignment,
                              profile=profile)
    num_iterations = cfg["runtime"]["num_iterations"]
    if num_iterations is None:
        num_iterations = cfg["model"]["epochs"] * session.iterations_per_epoch
    session.run_iterations(num_iterations)
    traces = session.traces

    (run_dir / "resolved_config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    with open(run_dir / "trace.jsonl", "w", encoding="utf-8") as f:
        for trace in traces:
            f.write(_json_dumps(trace.to_json_dict()) + "\n")

    with open(run_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "T_samp", "T_load", "T_trans", "T_prop",
                         "T_exec", "loss", "MTEPS"])
        for t in traces:
            d = t.durations
            writer.writerow([t.iteration, repr(d["sampling"]), repr(d["loading"]),
                             repr(d["transfer"]), repr(d["propagation"]),
                             repr(t.t_execution), repr(t.loss),
                             repr(t.throughput_mteps)])

    with open(run_dir / "drm_decisions.jsonl", "w", encoding="utf-8") as f:
        for rec in session.decision_log:
            f.write(_json_dumps(rec) + "\n")

    steady = traces[-1].latency if traces else 0.0
    report = {
        "predicted": plan_pred.as_dict(),
        "simulated_steady_latency": steady,
        "ratio": (steady / plan_pred.t_execution) if plan_pred.t_execution else None,
        "mode": rt.mode,
    }
    (run_dir / "predicted_vs_simulated.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    summary = {
        "epoch_time": session.pipeline.makespan,
        "MTEPS": traces[-1].throughput_mteps if traces else 0.0,
        "final_loss": traces[-1].loss if traces else None,
        "iterations": len(traces),
        "assignment_history": [t.assignment for t in traces],
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    print(str(run_dir))
    return 0


def cmd_profile_sampler(args) -> int:
    cfg = load_config(args.config, args.set or ())
    graph = build_graph(cfg)
    fanouts = cfg["model"]["fanouts"]
    seed = cfg["model"]["seed"]
    worker_counts = args.workers or [1, 2, 4]
    batch_sizes = args.batches or [64, 256, 1024]
    rng = np.random.default_rng(seed)

    grid = np.zeros((len(worker_counts), len(batch_sizes)))
    for i, workers in enumerate(worker_counts):
        for j, batch in enumerate(batch_sizes):
            batch = min(batch, graph.num_vertices)
            targets = rng.choice(graph.num_vertices, size=batch, replace=False)
            chunks = np.array_split(targets, workers)
            scfg = SamplerConfig(fanouts, batch, seed)

            def sample_chunk(chunk):
                if chunk.size:
                    sample_minibatch(graph, chunk, scfg, iteration_nonce=0)

            start = time.perf_counter()
            if workers == 1:
                sample_chunk(targets)
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    list(pool.map(sample_chunk, chunks))
            grid[i, j] = time.perf_counter() - start

    profile = SamplingProfile(worker_counts, batch_sizes, grid)
    profile.to_csv(args.output)
    print(args.output)
    return 0


def cmd_gen_dataset(args) -> int:
    cfg = load_config(args.config, args.set or ())
    if cfg["dataset"]["kind"] != "synthetic":
        raise ConfigError("dataset.kind", "gen-dataset requires synthetic parameters")
    graph = build_graph(cfg)
    save_binary_csr(graph, args.output)
    print(args.output)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gnnpipe",
                                     description="hybrid GNN training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", "-c", default=None, help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a dotted config path")

    p_run = sub.add_parser("run", help="train / simulate and write artifacts")
    add_common(p_run)
    p_run.add_argument("--run-dir", default=None, help="explicit output directory")
    p_run.set_defaults(fn=cmd_run)

    p_plan = sub.add_parser("plan", help="design-time mapping report (no training)")
    add_common(p_plan)
    p_plan.set_defaults(fn=cmd_plan)

    p_prof = sub.add_parser("profile-sampler", help="measure sampling times to CSV")
    add_common(p_prof)
    p_prof.add_argument("--output", "-o", required=True)
    p_prof.add_argument("--workers", type=int, nargs="+", default=None)
    p_prof.add_argument("--batches", type=int, nargs="+", default=None)
    p_prof.set_defaults(fn=cmd_profile_sampler)

    p_gen = sub.add_parser("gen-dataset", help="write a synthetic graph as binary-csr")
    add_common(p_gen)
    p_gen.add_argument("--output", "-o", required=True)
    p_gen.set_defaults(fn=cmd_gen_dataset)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
