"""Command line entry point: ``parashard plan|simulate|validate|gen``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, fixtures, ilp
from .ir import IRError, parse_program, to_json, to_text
from .planner import (
    ClusterConfig,
    PlanInfeasibleError,
    PlanOptions,
    candidate_dump,
    dumps_plan,
    plan,
    plan_to_json,
    simulate_plan,
    validate_plan,
)
from .taskgraph import TaskGraph, chrome_trace

log = logging.getLogger("parashard")


def _int_or_auto(text: str):
    if text == "auto":
        return text
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _read_graph(path: str, fmt: str | None):
    text = Path(path).read_text(encoding="utf-8")
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "text"
    return parse_program(text, fmt)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_plan(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def cmd_plan(args) -> int:
    g = _read_graph(args.graph, args.format)
    cluster = ClusterConfig.from_json(json.loads(Path(args.cluster).read_text(encoding="utf-8")))
    stages = args.pipeline_stages
    opts = PlanOptions(
        opt_level=args.opt_level,
        pipeline_stages=stages,
        microbatches=args.microbatches,
        memory_limit_bytes=args.memory_limit_bytes,
        ilp_time_limit=args.ilp_time_limit,
        epsilon=args.pipeline_epsilon,
        workers=args.workers,
    )
    if args.dump_ilp:
        ilp.set_dump_dir(args.dump_ilp)
    try:
        best = plan(g, cluster, opts)
    finally:
        ilp.set_dump_dir(None)
    doc = plan_to_json(best, g, cluster)
    _write(args.output, dumps_plan(doc))
    if args.emit_trace:
        Path(args.emit_trace).write_text(chrome_trace(best.task_graph, best.sim), encoding="utf-8")
    if args.dump_candidates:
        Path(args.dump_candidates).write_text(
            json.dumps(candidate_dump(best, g), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
    log.info("chose %s, simulated makespan %.6g s", best.descriptor, best.makespan)
    return 0


def cmd_simulate(args) -> int:
    doc = _load_plan(args.plan)
    sim = simulate_plan(doc)
    report = {"descriptor": doc.get("descriptor"), **sim.to_json()}
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.emit_trace:
        tg = TaskGraph.from_json(doc["task_graph"])
        Path(args.emit_trace).write_text(chrome_trace(tg, sim), encoding="utf-8")
    return 0


def cmd_validate(args) -> int:
    errs = validate_plan(_load_plan(args.plan))
    for e in errs:
        sys.stdout.write(f"error: {e}\n")
    sys.stdout.write("plan is valid\n" if not errs else f"{len(errs)} problem(s)\n")
    return 0 if not errs else 1


def cmd_gen(args) -> int:
    spec = fixtures.FixtureSpec(
        args.family, args.layers, args.hidden, args.batch, args.seed, args.seq, args.heads, args.experts,
        args.train,
    )
    g = fixtures.generate(spec)
    _write(args.output, to_json(g) if args.format == "json" else to_text(g))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parashard", description="Plan SPMD + pipeline execution of a tensor program.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="search for the best execution plan")
    p.add_argument("--graph", required=True, help="program in IR text or JSON")
    p.add_argument("--format", choices=("text", "json"), help="IR format (default: by file extension)")
    p.add_argument("--cluster", required=True, help="cluster description (JSON)")
    p.add_argument("--opt-level", type=int, choices=(2, 3), default=None,
                   help="2 = segmented search, 3 = whole graph (default: 3 below 5000 ops)")
    p.add_argument("--pipeline-stages", type=_int_or_auto, default="auto")
    p.add_argument("--microbatches", type=_int_or_auto, default="auto")
    p.add_argument("--pipeline-epsilon", type=float, default=0.3)
    p.add_argument("--memory-limit-bytes", type=float, default=None)
    p.add_argument("--ilp-time-limit", type=float, default=60.0)
    p.add_argument("--workers", type=int, default=1, help="candidate meshes planned in parallel")
    p.add_argument("--emit-trace", metavar="PATH", help="write a Chrome trace of the simulated schedule")
    p.add_argument("--dump-candidates", metavar="PATH", help="write per-op sharding candidates as JSON")
    p.add_argument("--dump-ilp", metavar="DIR", help="write every ILP solved as LP text into DIR")
    p.add_argument("-o", "--output", default="-", help="plan.json path (default: stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="re-simulate a plan's schedule")
    p.add_argument("--plan", required=True)
    p.add_argument("--emit-trace", metavar="PATH")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check a plan for consistency")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen", help="emit a fixture program")
    p.add_argument("--family", required=True, choices=fixtures.FAMILIES)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", action=argparse.BooleanOptionalAction, default=None,
                   help="include backward and optimizer ops (family default if omitted)")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PlanInfeasibleError as e:
        log.error("%s", e)
        return 3
    except (IRError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
