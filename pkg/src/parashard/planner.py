"""Mesh enumeration, per-candidate planning and best-of selection.

Every candidate (a mesh plus an optional pipeline axis) is planned
independently: stage split, SPMD search per stage on the remaining axes,
task graph, 1F1B schedule and simulation.  The candidate with the smallest
simulated makespan wins; ties go to the lexicographically smaller
descriptor.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

from . import __version__
from .ir import IRError, TensorProgram, program_from_dict, program_to_dict
from .pipeline import (
    DEFAULT_EPSILON,
    PipelineConfig,
    StageAssignment,
    StageInfeasibleError,
    assign_stages,
    partition_ops,
    stage_program,
)
from .sharding import (
    PARTIAL,
    DeviceMesh,
    ProgramView,
    Strategy,
    generate_candidates,
    local_shape,
    parse_spec,
    spec_valid,
)
from .spmd import MemoryBudget, MemoryInfeasibleError, SpmdPlan, search_spmd
from .taskgraph import (
    RECV,
    SEND,
    TICK,
    ScheduleError,
    SimResult,
    StageWork,
    TaskGraph,
    build_task_graph,
    schedule_1f1b,
    simulate,
    validate_schedule,
)

log = logging.getLogger(__name__)

__all__ = [
    "SCHEMA",
    "ClusterConfig",
    "MeshCandidate",
    "PlanOptions",
    "ExecutionPlan",
    "PlanInfeasibleError",
    "enumerate_meshes",
    "plan",
    "plan_candidate",
    "candidate_dump",
    "plan_to_json",
    "dumps_plan",
    "validate_plan",
    "simulate_plan",
]

SCHEMA = "parashard.plan/1"
AUTO_O2_OPS = 5000
PARTIAL_KINDS = frozenset({"MatMul", "ReduceSum", "Add"})


class PlanInfeasibleError(RuntimeError):
    """Every enumerated candidate failed; ``reasons`` maps descriptor -> error."""

    def __init__(self, reasons: Mapping[str, str]):
        self.reasons = dict(reasons)
        lines = "\n".join(f"  {k}: {v}" for k, v in sorted(self.reasons.items()))
        super().__init__(f"no feasible plan among {len(self.reasons)} candidate(s):\n{lines}")


@dataclass(frozen=True)
class ClusterConfig:
    machines: int = 1
    gpus_per_machine: int = 1
    intra_bandwidth: float = 1e11
    inter_bandwidth: float = 1e10
    intra_alpha: float = 1e-6
    inter_alpha: float = 1e-5
    device_flops: float = 1e12
    memory_bytes: float = 16e9

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k.endswith("alpha"):
                if v < 0:
                    raise ValueError(f"{k} must be >= 0")
            elif not v > 0:
                raise ValueError(f"{k} must be > 0")
        if int(self.machines) != self.machines or int(self.gpus_per_machine) != self.gpus_per_machine:
            raise ValueError("machines and gpus_per_machine must be integers")

    @property
    def devices(self) -> int:
        return self.machines * self.gpus_per_machine

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ClusterConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown cluster field(s): {sorted(extra)}")
        return cls(**dict(data))

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MeshCandidate:
    mesh: DeviceMesh
    pipeline_axis: int | None = None

    @property
    def descriptor(self) -> str:
        pp = "none" if self.pipeline_axis is None else str(self.pipeline_axis)
        return f"mesh={self.mesh.describe()};pp={pp}"


def enumerate_meshes(cluster: ClusterConfig) -> list[MeshCandidate]:
    """Machine-aligned 1D and 2D meshes, each with and without a pipeline axis.

    The 2D mesh is ``machines x gpus_per_machine`` (inter axis first); the
    1D mesh spans everything and is priced with the slowest link present.
    """
    n = cluster.devices
    flops = cluster.device_flops
    if cluster.machines > 1:
        flat = DeviceMesh((n,), (cluster.inter_bandwidth,), (cluster.inter_alpha,), flops, ("all",))
    else:
        flat = DeviceMesh((n,), (cluster.intra_bandwidth,), (cluster.intra_alpha,), flops, ("intra",))
    meshes = [flat]
    if cluster.machines > 1 and cluster.gpus_per_machine > 1:
        meshes.append(DeviceMesh(
            (cluster.machines, cluster.gpus_per_machine),
            (cluster.inter_bandwidth, cluster.intra_bandwidth),
            (cluster.inter_alpha, cluster.intra_alpha),
            flops,
            ("inter", "intra"),
        ))
    out: list[MeshCandidate] = []
    seen = set()
    for mesh in meshes:
        for pp in [None] + [a for a, d in enumerate(mesh.dims) if d > 1]:
            c = MeshCandidate(mesh, pp)
            if c.descriptor not in seen:
                seen.add(c.descriptor)
                out.append(c)
    return out


@dataclass(frozen=True)
class PlanOptions:
    opt_level: int | None = None  # None: 3 below AUTO_O2_OPS operators, else 2
    pipeline_stages: int | str | None = "auto"  # int, "auto", or None to disable
    microbatches: int | str = "auto"
    memory_limit_bytes: float | None = None
    state_multiplier: float = 3.0
    ilp_time_limit: float | None = 60.0
    epsilon: float = DEFAULT_EPSILON
    workers: int = 1


@dataclass
class ExecutionPlan:
    candidate: MeshCandidate
    microbatches: int
    spmd_axes: list[int]
    stage: dict[str, int]
    assignment: StageAssignment | None
    spmd: list[SpmdPlan]
    work: list[StageWork]
    transfers: dict[tuple[int, int], float]
    back_transfers: dict[tuple[int, int], float]
    task_graph: TaskGraph
    sim: SimResult
    memory_bytes: list[float | None]
    memory_limit: float | None
    epsilon: float = DEFAULT_EPSILON
    candidates: list[dict] = field(default_factory=list)

    @property
    def descriptor(self) -> str:
        return f"{self.candidate.descriptor};m={self.microbatches}"

    @property
    def makespan(self) -> float:
        return self.sim.makespan

    @property
    def stages(self) -> int:
        return len(self.spmd)

    def sharding(self) -> dict[str, list[Strategy]]:
        out = {}
        for s, sp in enumerate(self.spmd):
            for k in sp.local_view.topo:
                if self.stage.get(k) == s:
                    out[k] = [c[k] for c in sp.choices]
        return out

    @property
    def spmd_dims(self) -> list[int]:
        """Axis sizes each stage's SPMD search ran on (``[1]`` if none remain)."""
        return [self.candidate.mesh.dims[a] for a in self.spmd_axes] or [1]

    def comm_bytes(self) -> float:
        spmd = sum(sp.comm_bytes for sp in self.spmd)
        p2p = sum(self.transfers.values()) + sum(self.back_transfers.values())
        return spmd + p2p * self.microbatches


# --------------------------------------------------------------------------
# per-candidate planning


def _submesh(mesh: DeviceMesh, axes: Sequence[int]) -> DeviceMesh:
    if not axes:
        return DeviceMesh((1,), (mesh.bandwidth[0],), (mesh.alpha[0],), mesh.device_flops)
    names = tuple(mesh.axis_names[a] for a in axes) if mesh.axis_names else ()
    return DeviceMesh(
        tuple(mesh.dims[a] for a in axes),
        tuple(mesh.bandwidth[a] for a in axes),
        tuple(mesh.alpha[a] for a in axes),
        mesh.device_flops,
        names,
    )


def _stage_work(g: TensorProgram, sp: SpmdPlan, mesh: DeviceMesh, m: int, extra_update: float = 0.0) -> StageWork:
    """Per-microbatch cost of one stage; the update runs once per step."""
    costs = sp.op_costs(mesh.device_flops)
    fwd = bwd = upd = 0.0
    grad_elems = 0
    act = 0.0
    for k, (comp, comm, _) in costs.items():
        if k not in g or sp.local_view.ops[k].attrs.get("proxy"):
            continue
        op = g[k]
        t = comp + comm
        if op.phase == "fwd":
            fwd += t
            if any(g[c].phase == "bwd" for c in g.consumers(k)):
                act += sp.local_view.ops[k].output_shape.nbytes
        elif op.phase == "bwd":
            bwd += t
        else:
            upd += t
        if op.kind == "Parameter":
            grad_elems += sp.local_view.ops[k].output_shape.numel
    return StageWork(fwd / m, bwd / m, upd + extra_update, grad_elems / mesh.device_flops, act / m)


def _spmd(g: TensorProgram, mesh: DeviceMesh, opts: PlanOptions, limit: float | None) -> SpmdPlan:
    budget = None if limit is None else MemoryBudget(limit, opts.state_multiplier)
    level = opts.opt_level
    if level is None:
        level = 3 if len(g) < AUTO_O2_OPS else 2
    return search_spmd(g, mesh, None, level, budget, opts.ilp_time_limit)


def _microbatch_grid(opts: PlanOptions, stages: int) -> list[int]:
    if opts.microbatches != "auto":
        return [int(opts.microbatches)]
    return [1] if stages == 1 else [stages, 2 * stages, 4 * stages]


def plan_candidate(g: TensorProgram, cluster: ClusterConfig, cand: MeshCandidate,
                   opts: PlanOptions) -> list[ExecutionPlan]:
    """Plans for one candidate, one per microbatch count tried."""
    mesh = cand.mesh
    limit = opts.memory_limit_bytes if opts.memory_limit_bytes is not None else cluster.memory_bytes
    pp = cand.pipeline_axis
    spmd_axes = [a for a in range(len(mesh.dims)) if a != pp]
    sub = _submesh(mesh, spmd_axes)
    if pp is None:
        S = 1
        stage = {k: 0 for k in g.topo}
        assignment = None
        programs = [g]
        p2p_alpha, p2p_bw = 0.0, float("inf")
    else:
        S = mesh.dims[pp]
        assignment = assign_stages(g, PipelineConfig(S, 1, opts.epsilon), time_limit=opts.ilp_time_limit)
        stage = assignment.stage
        programs = [stage_program(g, stage, s) for s in range(S)]
        p2p_alpha, p2p_bw = mesh.alpha[pp], mesh.bandwidth[pp]
    plans = [_spmd(p, sub, opts, limit) for p in programs]

    # per-device bytes of every value crossing a stage boundary
    fwd_x: dict[tuple[int, int], float] = {}
    bwd_x: dict[tuple[int, int], float] = {}
    upd_comm = [0.0] * S
    seen = set()
    for a, b in g.edges():
        sa, sb = stage[a], stage[b]
        if sa == sb or (a, sb) in seen:
            continue
        seen.add((a, sb))
        nb = float(plans[sa].local_view.ops[a].output_shape.nbytes)
        if g[b].phase == "update":
            upd_comm[sb] += p2p_alpha + nb / p2p_bw
        elif sa < sb:
            fwd_x[sa, sb] = fwd_x.get((sa, sb), 0.0) + nb
        else:
            bwd_x[sb, sa] = bwd_x.get((sb, sa), 0.0) + nb

    out = []
    for m in _microbatch_grid(opts, S):
        work = [_stage_work(g, plans[s], sub, m, upd_comm[s]) for s in range(S)]
        fx = {k: v / m for k, v in fwd_x.items()}
        bx = {k: v / m for k, v in bwd_x.items()}
        tg = build_task_graph(work, m, fx, p2p_alpha, p2p_bw, back_transfers=bx)
        schedule_1f1b(tg)
        sim = simulate(tg, [w.activation_bytes for w in work])
        out.append(ExecutionPlan(
            cand, m, spmd_axes, dict(stage), assignment, plans, work, fx, bx, tg, sim,
            [p.memory_bytes for p in plans], limit, opts.epsilon,
        ))
    return out


def _run_candidate(args):
    g, cluster, cand, opts = args
    try:
        return cand.descriptor, plan_candidate(g, cluster, cand, opts), None
    except (MemoryInfeasibleError, StageInfeasibleError, ValueError) as e:
        return cand.descriptor, [], f"{type(e).__name__}: {e}"


def plan(g: TensorProgram, cluster: ClusterConfig, opts: PlanOptions | None = None) -> ExecutionPlan:
    """Best plan over every enumerated mesh candidate."""
    opts = opts or PlanOptions()
    cands = enumerate_meshes(cluster)
    if opts.pipeline_stages is None or opts.pipeline_stages == 1:
        cands = [c for c in cands if c.pipeline_axis is None]
    elif opts.pipeline_stages != "auto":
        want = int(opts.pipeline_stages)
        cands = [c for c in cands if c.pipeline_axis is not None and c.mesh.dims[c.pipeline_axis] == want]
        if not cands:
            raise PlanInfeasibleError({f"pipeline_stages={want}": "no mesh axis of that size"})
    jobs = [(g, cluster, c, opts) for c in cands]
    if opts.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(_run_candidate, jobs))
    else:
        results = [_run_candidate(j) for j in jobs]
    log_rows: list[dict] = []
    errors: dict[str, str] = {}
    best: ExecutionPlan | None = None
    for desc, plans, err in results:
        if err is not None:
            errors[desc] = err
            log_rows.append({"descriptor": desc, "status": "infeasible", "reason": err})
            log.info("candidate %s infeasible: %s", desc, err)
            continue
        for p in plans:
            log_rows.append({"descriptor": p.descriptor, "status": "ok", "makespan": p.makespan})
            log.info("candidate %s makespan %.6g s", p.descriptor, p.makespan)
            if best is None or (p.makespan, p.descriptor) < (best.makespan, best.descriptor):
                best = p
    if best is None:
        raise PlanInfeasibleError(errors)
    best.candidates = sorted(log_rows, key=lambda r: r["descriptor"])
    return best


def candidate_dump(p: ExecutionPlan, g: TensorProgram) -> dict:
    """Candidate strategies each stage's search saw, per SPMD axis."""
    sub = _submesh(p.candidate.mesh, p.spmd_axes)
    out = {}
    for s, sp in enumerate(p.spmd):
        prog = g if p.stages == 1 else stage_program(g, p.stage, s)
        view = ProgramView.from_program(prog)
        axes = []
        for t, choice in enumerate(sp.choices):
            cands = generate_candidates(view, sub, t)
            axes.append({k: [c.to_json() for c in v] for k, v in sorted(cands.items())})
            view = view.localize(choice, sub.dims[t])
        out[str(s)] = axes
    return out


# --------------------------------------------------------------------------
# serialization


def _mesh_json(mesh: DeviceMesh) -> dict:
    return {
        "dims": list(mesh.dims),
        "bandwidth": list(mesh.bandwidth),
        "alpha": list(mesh.alpha),
        "device_flops": mesh.device_flops,
        "axis_names": list(mesh.axis_names),
    }


def _mesh_from_json(d: Mapping) -> DeviceMesh:
    return DeviceMesh(tuple(d["dims"]), tuple(d["bandwidth"]), tuple(d["alpha"]), float(d["device_flops"]),
                      tuple(d.get("axis_names", ())))


def _pairs_json(x: Mapping[tuple[int, int], float]) -> list:
    return [[a, b, v] for (a, b), v in sorted(x.items())]


def plan_to_json(p: ExecutionPlan, g: TensorProgram, cluster: ClusterConfig) -> dict:
    sharding = {k: [s.to_json() for s in v] for k, v in sorted(p.sharding().items())}
    pipe = None
    if p.candidate.pipeline_axis is not None:
        a = p.assignment
        pipe = {
            "axis": p.candidate.pipeline_axis,
            "stages": p.stages,
            "epsilon": p.epsilon,
            "cut_bytes": a.cut_volume if a else 0.0,
            "stage_flops": list(a.stage_comp) if a else [],
        }
    return {
        "schema": SCHEMA,
        "generator": f"parashard {__version__}",
        "program": program_to_dict(g),
        "cluster": cluster.to_json(),
        "mesh": _mesh_json(p.candidate.mesh),
        "descriptor": p.descriptor,
        "spmd_axes": list(p.spmd_axes),
        "spmd_dims": p.spmd_dims,
        "microbatches": p.microbatches,
        "pipeline": pipe,
        "stage": {k: p.stage[k] for k in g.topo},
        "sharding": sharding,
        "stage_work": [asdict(w) for w in p.work],
        "transfers": {"fwd": _pairs_json(p.transfers), "bwd": _pairs_json(p.back_transfers)},
        "memory": {"limit_bytes": p.memory_limit, "per_device_bytes": p.memory_bytes,
                   "forced_k": [sp.memory_k for sp in p.spmd]},
        "task_graph": p.task_graph.to_json(),
        "cost": {
            "makespan": p.makespan,
            "comm_bytes": p.comm_bytes(),
            "spmd_comm_seconds": sum(sp.comm_seconds for sp in p.spmd),
            "collectives": _merge_counts(sp.collectives() for sp in p.spmd),
            **{k: v for k, v in p.sim.to_json().items() if k != "makespan"},
        },
        "candidates": p.candidates,
    }


def _merge_counts(items) -> dict[str, int]:
    out: dict[str, int] = {}
    for d in items:
        for k, v in d.items():
            out[k] = out.get(k, 0) + v
    return dict(sorted(out.items()))


def dumps_plan(d: Mapping) -> str:
    """Canonical text of a plan document (stable key order, trailing newline)."""
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# independent checks


def _task_graph_from_plan(d: Mapping) -> TaskGraph:
    return TaskGraph.from_json(d["task_graph"])


def simulate_plan(d: Mapping) -> SimResult:
    tg = _task_graph_from_plan(d)
    return simulate(tg, [w["activation_bytes"] for w in d.get("stage_work", [])])


def validate_plan(d: Mapping) -> list[str]:
    """Problems found in a plan document; empty when it is consistent.

    Checks spec validity on the mesh, stage precedence, the schedule being
    a linear extension of the task graph, the recorded makespan, and the
    memory estimate against the budget.
    """
    errs: list[str] = []
    if d.get("schema") != SCHEMA:
        return [f"unsupported schema {d.get('schema')!r}, expected {SCHEMA!r}"]
    try:
        g = program_from_dict(d["program"])
        mesh = _mesh_from_json(d["mesh"])
    except (IRError, KeyError, ValueError, TypeError) as e:
        return [f"cannot load plan: {e}"]
    spmd_axes = list(d["spmd_axes"])
    sizes = list(d["spmd_dims"])
    if sizes != ([mesh.dims[a] for a in spmd_axes] or [1]):
        errs.append(f"spmd_dims {sizes} do not match mesh axes {spmd_axes}")
    stage = d["stage"]
    if set(stage) != set(g.topo):
        errs.append("stage map does not cover exactly the program's operators")
        return errs
    S = 1 if d["pipeline"] is None else int(d["pipeline"]["stages"])
    if d["pipeline"] is not None and mesh.dims[d["pipeline"]["axis"]] != S:
        errs.append("pipeline stage count differs from its mesh axis size")

    # sharding
    sharding = d["sharding"]
    for k in g.topo:
        if k not in sharding:
            errs.append(f"{k}: no sharding")
            continue
        per_axis = sharding[k]
        if len(per_axis) != len(sizes):
            errs.append(f"{k}: {len(per_axis)} axis strategies for {len(sizes)} SPMD axes")
            continue
        op = g[k]
        out_shape = op.output_shape
        in_shapes = [g[i].output_shape for i in op.inputs]
        for t, (entry, dsz) in enumerate(zip(per_axis, sizes)):
            try:
                st = Strategy.from_json(entry)
            except (ValueError, KeyError) as e:
                errs.append(f"{k}: axis {t}: {e}")
                break
            if len(st.ins) != len(op.inputs):
                errs.append(f"{k}: axis {t}: {len(st.ins)} input specs for {len(op.inputs)} inputs")
                break
            if st.out == PARTIAL and op.kind not in PARTIAL_KINDS:
                errs.append(f"{k}: axis {t}: Partial output on a {op.kind}")
            bad = not spec_valid(st.out, out_shape, dsz)
            if bad:
                errs.append(f"{k}: axis {t}: {st.out} invalid for {out_shape} on {dsz} devices")
            for j, (spec, sh) in enumerate(zip(st.ins, in_shapes)):
                if not spec_valid(spec, sh, dsz):
                    bad = True
                    errs.append(f"{k}: axis {t}: input {j} spec {spec} invalid for {sh}")
            if bad:
                break  # later axes would see meaningless local shapes
            out_shape = local_shape(out_shape, st.out, dsz)
            in_shapes = [local_shape(sh, sp, dsz) for sh, sp in zip(in_shapes, st.ins)]
        pins = op.attrs.get("pin")
        if pins is not None:
            pins = [pins] if isinstance(pins, str) else list(pins)
            for t, pin in enumerate(pins[: len(per_axis)]):
                if pin in (None, "", "*"):
                    continue
                shape = op.output_shape
                for u in range(t):
                    shape = local_shape(shape, parse_spec(per_axis[u]["out"]), sizes[u])
                if parse_spec(str(pin), shape, sizes[t]) != parse_spec(per_axis[t]["out"]):
                    errs.append(f"{k}: axis {t}: pin {pin} not honoured")

    # stages
    used = set()
    for k, s in stage.items():
        if not (isinstance(s, int) and 0 <= s < S):
            errs.append(f"{k}: stage {s!r} outside 0..{S - 1}")
        used.add(s)
    if used != set(range(S)):
        errs.append(f"stages used {sorted(used)} are not 0..{S - 1}")
    fwd = set(partition_ops(g))
    for a, b in g.edges():
        if a in fwd and b in fwd and stage[a] > stage[b]:
            errs.append(f"edge {a} -> {b} goes from stage {stage[a]} back to {stage[b]}")

    # task graph and schedule
    try:
        tg = _task_graph_from_plan(d)
        validate_schedule(tg)
        _check_acyclic(tg)
        sends = {n.id for n in tg.nodes.values() if n.kind == SEND}
        for n in tg.nodes.values():
            if n.kind == RECV:
                ps = [p for p in tg.preds[n.id] if p in sends]
                if len(ps) != 1 or tg.nodes[ps[0]].bytes != n.bytes or tg.nodes[ps[0]].group == n.group:
                    errs.append(f"{n.id}: not paired with exactly one matching send")
        sim = simulate_plan(d)
        want = float(d["cost"]["makespan"])
        if abs(sim.makespan - want) > TICK * max(1, len(tg.nodes)):
            errs.append(f"recorded makespan {want} but simulation gives {sim.makespan}")
    except (ScheduleError, KeyError, ValueError) as e:
        errs.append(f"task graph: {e}")

    # memory
    mem = d.get("memory", {})
    limit = mem.get("limit_bytes")
    if limit is not None:
        for s, b in enumerate(mem.get("per_device_bytes", [])):
            if b is not None and b > limit * (1 + 1e-12):
                errs.append(f"stage {s}: {b:.0f} bytes per device exceeds the {limit:.0f} byte budget")
    return errs


def _check_acyclic(tg: TaskGraph) -> None:
    indeg = {k: len(ps) for k, ps in tg.preds.items()}
    succ: dict[str, list[str]] = {k: [] for k in tg.nodes}
    for b, ps in tg.preds.items():
        for a in ps:
            succ[a].append(b)
    todo = [k for k, v in indeg.items() if v == 0]
    seen = 0
    while todo:
        k = todo.pop()
        seen += 1
        for b in succ[k]:
            indeg[b] -= 1
            if indeg[b] == 0:
                todo.append(b)
    if seen != len(tg.nodes):
        raise ScheduleError("task graph has a cycle")
