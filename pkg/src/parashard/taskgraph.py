"""Task graph, static 1F1B schedule and a discrete-event simulator.

Each pipeline stage is one device group; every device in a group runs the
same SPMD program, so a group is simulated as a single sequential worker.
Communication and computation never overlap on a group.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

log = logging.getLogger(__name__)

__all__ = [
    "CG",
    "LA",
    "AG",
    "SEND",
    "RECV",
    "SOURCE",
    "SINK",
    "TICK",
    "StageWork",
    "TaskNode",
    "TaskGraph",
    "SimResult",
    "ScheduleError",
    "build_task_graph",
    "schedule_1f1b",
    "validate_schedule",
    "simulate",
    "chrome_trace",
]

CG = "ComputeGradients"
LA = "LocalAccumulate"
AG = "ApplyGradients"
SEND = "Send"
RECV = "Recv"
SOURCE = "Source"
SINK = "Sink"

# time resolution used when comparing simulated times
TICK = 1e-9


class ScheduleError(RuntimeError):
    """Schedule is not a linear extension of the task graph."""


@dataclass(frozen=True)
class StageWork:
    """Per-microbatch cost of one stage on its device group."""

    fwd: float
    bwd: float
    update: float = 0.0
    accumulate: float = 0.0  # seconds to fold one extra microbatch's gradients
    activation_bytes: float = 0.0


@dataclass
class TaskNode:
    id: str
    kind: str
    group: int | None
    duration: float = 0.0
    bytes: float = 0.0
    stage: int | None = None
    microbatch: int | None = None
    direction: str | None = None

    @property
    def label(self) -> str:
        if self.kind == CG:
            tag = {"fwd": "F", "bwd": "B"}.get(self.direction or "", "C")
            return f"{tag}{self.microbatch}"
        return self.kind

    def to_json(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "group": self.group, "duration": self.duration}
        if self.kind in (SEND, RECV):
            d["bytes"] = self.bytes
        for k in ("stage", "microbatch", "direction"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


@dataclass
class TaskGraph:
    stages: int
    microbatches: int
    nodes: dict[str, TaskNode] = field(default_factory=dict)
    preds: dict[str, list[str]] = field(default_factory=dict)
    schedule: dict[int, list[str]] = field(default_factory=dict)

    def add(self, node: TaskNode, after: Sequence[str] = ()) -> str:
        if node.id in self.nodes:
            raise ValueError(f"duplicate task {node.id!r}")
        self.nodes[node.id] = node
        self.preds[node.id] = []
        for p in after:
            self.edge(p, node.id)
        return node.id

    def edge(self, a: str, b: str) -> None:
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"unknown task in edge {a!r} -> {b!r}")
        if a not in self.preds[b]:
            self.preds[b].append(a)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(a, b) for b, ps in self.preds.items() for a in ps]

    def groups(self) -> list[int]:
        return sorted({n.group for n in self.nodes.values() if n.group is not None})

    def kinds(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for n in self.nodes.values():
            out[n.kind] = out.get(n.kind, 0) + 1
        return dict(sorted(out.items()))

    def find(self, kind: str, stage: int | None = None, microbatch: int | None = None,
             direction: str | None = None) -> list[str]:
        return [
            n.id for n in self.nodes.values()
            if n.kind == kind
            and (stage is None or n.stage == stage)
            and (microbatch is None or n.microbatch == microbatch)
            and (direction is None or n.direction == direction)
        ]

    def to_json(self) -> dict:
        return {
            "stages": self.stages,
            "microbatches": self.microbatches,
            "nodes": [n.to_json() for n in self.nodes.values()],
            "edges": [list(e) for e in self.edges],
            "schedule": {str(g): list(v) for g, v in sorted(self.schedule.items())},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TaskGraph":
        tg = cls(int(d["stages"]), int(d["microbatches"]))
        for n in d["nodes"]:
            tg.add(TaskNode(n["id"], n["kind"], n.get("group"), float(n.get("duration", 0.0)),
                            float(n.get("bytes", 0.0)), n.get("stage"), n.get("microbatch"),
                            n.get("direction")))
        for a, b in d["edges"]:
            tg.edge(a, b)
        tg.schedule = {int(g): list(v) for g, v in d.get("schedule", {}).items()}
        return tg


def _p2p_seconds(nbytes: float, alpha: float, bandwidth: float) -> float:
    return alpha + nbytes / bandwidth if nbytes > 0 else 0.0


def build_task_graph(
    work: Sequence[StageWork],
    microbatches: int,
    transfers: Mapping[tuple[int, int], float] | None = None,
    alpha: float = 0.0,
    bandwidth: float = float("inf"),
    back_transfers: Mapping[tuple[int, int], float] | None = None,
) -> TaskGraph:
    """Task graph for ``len(work)`` stages and ``microbatches`` microbatches.

    ``transfers[(a, b)]`` is the per-microbatch byte count stage ``a`` sends
    to stage ``b`` in the forward pass.  ``back_transfers[(a, b)]`` is what
    ``b`` returns to ``a`` in the backward pass and defaults to the same
    volume.  A single stage gets one combined compute node per microbatch.
    """
    S, m = len(work), int(microbatches)
    if S < 1:
        raise ValueError("need at least one stage")
    if m < 1:
        raise ValueError("microbatches must be >= 1")
    transfers = dict(transfers or {})
    back = dict(transfers if back_transfers is None else back_transfers)
    for a, b in list(transfers) + list(back):
        if not (0 <= a < b < S):
            raise ValueError(f"transfer {a}->{b} does not go forward between existing stages")
    tg = TaskGraph(S, m)
    src = tg.add(TaskNode("source", SOURCE, None))
    last: list[str] = []
    if S == 1:
        w = work[0]
        cgs = [
            tg.add(TaskNode(f"cg.s0.m{mb}", CG, 0, w.fwd + w.bwd, stage=0, microbatch=mb, direction="fwdbwd"), [src])
            for mb in range(1, m + 1)
        ]
        tail = cgs
        if m > 1:
            tail = [tg.add(TaskNode("la.s0", LA, 0, w.accumulate * (m - 1), stage=0), cgs)]
        last.append(tg.add(TaskNode("ag.s0", AG, 0, w.update, stage=0), tail))
    else:
        fwd = {}
        bwd = {}
        for s, w in enumerate(work):
            for mb in range(1, m + 1):
                fwd[s, mb] = tg.add(TaskNode(f"cg.s{s}.m{mb}.fwd", CG, s, w.fwd, stage=s, microbatch=mb,
                                             direction="fwd"), [src])
        for s, w in enumerate(work):
            for mb in range(1, m + 1):
                bwd[s, mb] = tg.add(TaskNode(f"cg.s{s}.m{mb}.bwd", CG, s, w.bwd, stage=s, microbatch=mb,
                                             direction="bwd"), [fwd[s, mb]])
        for (a, b), nb in sorted(transfers.items()):
            dur = _p2p_seconds(nb, alpha, bandwidth)
            for mb in range(1, m + 1):
                snd = tg.add(TaskNode(f"send.s{a}-s{b}.m{mb}.fwd", SEND, a, dur, nb, a, mb, "fwd"), [fwd[a, mb]])
                rcv = tg.add(TaskNode(f"recv.s{a}-s{b}.m{mb}.fwd", RECV, b, 0.0, nb, b, mb, "fwd"), [snd])
                tg.edge(rcv, fwd[b, mb])
        for (a, b), nb in sorted(back.items()):
            dur = _p2p_seconds(nb, alpha, bandwidth)
            for mb in range(1, m + 1):
                snd = tg.add(TaskNode(f"send.s{b}-s{a}.m{mb}.bwd", SEND, b, dur, nb, b, mb, "bwd"), [bwd[b, mb]])
                rcv = tg.add(TaskNode(f"recv.s{b}-s{a}.m{mb}.bwd", RECV, a, 0.0, nb, a, mb, "bwd"), [snd])
                tg.edge(rcv, bwd[a, mb])
        for s, w in enumerate(work):
            tail = [bwd[s, mb] for mb in range(1, m + 1)]
            if m > 1:
                tail = [tg.add(TaskNode(f"la.s{s}", LA, s, w.accumulate * (m - 1), stage=s), tail)]
            last.append(tg.add(TaskNode(f"ag.s{s}", AG, s, w.update, stage=s), tail))
    tg.add(TaskNode("sink", SINK, None), last)
    return tg


def schedule_1f1b(tg: TaskGraph) -> dict[int, list[str]]:
    """Static one-forward-one-backward order per device group.

    Stage ``s`` runs ``min(m, S - s)`` forwards, then alternates backward
    and forward, then drains the remaining backwards.  Receives sit just
    before the compute node that needs them and sends just after the one
    that produces them.
    """
    S, m = tg.stages, tg.microbatches
    recv_for: dict[str, list[str]] = {}
    send_after: dict[str, list[str]] = {}
    for b, ps in tg.preds.items():
        for a in ps:
            if tg.nodes[a].kind == RECV:
                recv_for.setdefault(b, []).append(a)
    for n in tg.nodes.values():
        if n.kind == SEND:
            for p in tg.preds[n.id]:
                send_after.setdefault(p, []).append(n.id)
    order: dict[int, list[str]] = {}
    for s in range(S):
        if S == 1:
            seq = [f"cg.s0.m{mb}" for mb in range(1, m + 1)]
        else:
            F = [f"cg.s{s}.m{mb}.fwd" for mb in range(1, m + 1)]
            B = [f"cg.s{s}.m{mb}.bwd" for mb in range(1, m + 1)]
            warm = min(m, S - s)
            seq = F[:warm]
            for i in range(m - warm):
                seq += [B[i], F[warm + i]]
            seq += B[m - warm:]
        out: list[str] = []
        for k in seq:
            out += sorted(recv_for.get(k, ()))
            out.append(k)
            out += sorted(send_after.get(k, ()))
        out += [k for k in (f"la.s{s}", f"ag.s{s}") if k in tg.nodes]
        order[s] = out
    tg.schedule = order
    validate_schedule(tg)
    return order


def validate_schedule(tg: TaskGraph) -> None:
    """Check the per-group orders cover the grouped nodes and respect edges."""
    pos: dict[str, tuple[int, int]] = {}
    for g, seq in tg.schedule.items():
        for i, k in enumerate(seq):
            if k not in tg.nodes:
                raise ScheduleError(f"schedule names unknown task {k!r}")
            if tg.nodes[k].group != g:
                raise ScheduleError(f"task {k!r} scheduled on group {g}, belongs to {tg.nodes[k].group}")
            if k in pos:
                raise ScheduleError(f"task {k!r} scheduled twice")
            pos[k] = (g, i)
    missing = [k for k, n in tg.nodes.items() if n.group is not None and k not in pos]
    if missing:
        raise ScheduleError(f"{len(missing)} task(s) unscheduled, e.g. {missing[0]!r}")
    for a, b in tg.edges:
        if a in pos and b in pos and pos[a][0] == pos[b][0] and pos[a][1] > pos[b][1]:
            raise ScheduleError(f"{a!r} must run before {b!r} on group {pos[a][0]}")


@dataclass
class SimResult:
    makespan: float
    busy: dict[int, float]
    comm: dict[int, float]
    peak_inflight: dict[int, int]
    peak_activation_bytes: dict[int, float]
    start: dict[str, float] = field(repr=False, default_factory=dict)
    finish: dict[str, float] = field(repr=False, default_factory=dict)

    def bubble_fraction(self) -> float:
        if self.makespan <= 0:
            return 0.0
        used = max((self.busy[g] + self.comm[g] for g in self.busy), default=0.0)
        return 1.0 - used / self.makespan

    def to_json(self) -> dict:
        return {
            "makespan": self.makespan,
            "busy": {str(k): v for k, v in sorted(self.busy.items())},
            "comm": {str(k): v for k, v in sorted(self.comm.items())},
            "peak_inflight": {str(k): v for k, v in sorted(self.peak_inflight.items())},
            "peak_activation_bytes": {str(k): v for k, v in sorted(self.peak_activation_bytes.items())},
        }


def simulate(tg: TaskGraph, activation_bytes: Sequence[float] | None = None) -> SimResult:
    """Run the static schedule; each group executes its order sequentially.

    A task starts once its predecessors have finished and every earlier
    task on its group is done.  Ungrouped tasks (source, sink) take no time.
    """
    if not tg.schedule:
        schedule_1f1b(tg)
    validate_schedule(tg)
    start: dict[str, float] = {}
    finish: dict[str, float] = {}
    free = {g: 0.0 for g in tg.schedule}
    head = {g: 0 for g in tg.schedule}
    loose = [k for k, n in tg.nodes.items() if n.group is None]
    remaining = len(tg.nodes)

    def ready(k):
        ps = tg.preds[k]
        if any(p not in finish for p in ps):
            return None
        return max((finish[p] for p in ps), default=0.0)

    while remaining:
        progress = False
        for k in loose:
            if k not in finish:
                t = ready(k)
                if t is not None:
                    start[k] = finish[k] = t
                    remaining -= 1
                    progress = True
        for g, seq in tg.schedule.items():
            while head[g] < len(seq):
                k = seq[head[g]]
                t = ready(k)
                if t is None:
                    break
                start[k] = max(t, free[g])
                finish[k] = free[g] = start[k] + tg.nodes[k].duration
                head[g] += 1
                remaining -= 1
                progress = True
        if not progress:
            stuck = {g: seq[head[g]] for g, seq in tg.schedule.items() if head[g] < len(seq)}
            raise ScheduleError(f"simulation deadlocked at {stuck}")

    busy = {g: 0.0 for g in tg.schedule}
    comm = {g: 0.0 for g in tg.schedule}
    events: dict[int, list[tuple[float, int]]] = {g: [] for g in tg.schedule}
    for k, n in tg.nodes.items():
        if n.group is None:
            continue
        if n.kind in (SEND, RECV):
            comm[n.group] += n.duration
        else:
            busy[n.group] += n.duration
        if n.kind == CG and n.direction in ("fwd", "fwdbwd"):
            events[n.group].append((start[k], 1))
        if n.kind == CG and n.direction in ("bwd", "fwdbwd"):
            events[n.group].append((finish[k], -1))
    peak = {}
    for g, ev in events.items():
        cur = best = 0
        # releases at the same instant happen before new forwards start
        for _, dv in sorted(ev):
            cur += dv
            best = max(best, cur)
        peak[g] = best
    act = list(activation_bytes) if activation_bytes is not None else [0.0] * len(tg.schedule)
    peak_act = {g: peak[g] * (act[g] if g < len(act) else 0.0) for g in tg.schedule}
    makespan = max(finish.values(), default=0.0)
    return SimResult(makespan, busy, comm, peak, peak_act, start, finish)


def chrome_trace(tg: TaskGraph, sim: SimResult) -> str:
    """Chrome trace-event JSON (microsecond timestamps, one row per group)."""
    events = []
    for k, n in tg.nodes.items():
        if n.group is None:
            continue
        args = {"kind": n.kind}
        if n.kind in (SEND, RECV):
            args["bytes"] = n.bytes
        events.append({
            "name": n.label if n.kind == CG else k,
            "cat": n.kind,
            "ph": "X",
            "ts": sim.start[k] * 1e6,
            "dur": n.duration * 1e6,
            "pid": 0,
            "tid": n.group,
            "args": args,
        })
    for g in tg.schedule:
        events.append({"name": "thread_name", "ph": "M", "pid": 0, "tid": g, "args": {"name": f"stage {g}"}})
    return json.dumps({"traceEvents": events, "displayTimeUnit": "ms"}, indent=1, sort_keys=True)
