"""Pipeline stage partitioning of a program DAG.

Stages are chosen by a 0-1 program that minimises the bytes crossing stage
boundaries.  Balance comes only from per-op stage bounds derived from the
compute of each op's ancestors and descendants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ilp
from .ir import Operator, TensorProgram, TensorShape, ancestor_matrix

log = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "StageAssignment",
    "StageInfeasibleError",
    "partition_ops",
    "tighten_bounds",
    "build_stage_ilp",
    "assign_stages",
    "extend_assignment",
    "stage_program",
]

DEFAULT_EPSILON = 0.3


class StageInfeasibleError(RuntimeError):
    """No balanced split exists at the requested tolerance."""


@dataclass(frozen=True)
class PipelineConfig:
    stages: int
    microbatches: int = 1
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError("a pipeline needs at least 2 stages")
        if self.microbatches < 1:
            raise ValueError("microbatches must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class StageAssignment:
    stage: dict[str, int]
    d: int
    cut_volume: float
    stage_comp: list[float]
    status: str = ilp.OPTIMAL
    bounds: dict[str, tuple[int, int]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def members(self, s: int) -> list[str]:
        return [k for k, v in self.stage.items() if v == s]


def partition_ops(g: TensorProgram) -> list[str]:
    """Ops the partitioner places directly, in topological order.

    That is the forward phase minus sources feeding only later phases
    (optimizer state); everything else follows its forward counterpart.
    """
    keep = []
    for k in g.topo:
        op = g[k]
        if op.phase != "fwd":
            continue
        if not op.inputs:
            cons = g.consumers(k)
            if cons and all(g[c].phase != "fwd" for c in cons):
                continue
        keep.append(k)
    return keep


def _edges(g: TensorProgram, ops: Sequence[str]) -> list[tuple[str, str]]:
    inside = set(ops)
    out = []
    for k in ops:
        for src in g.producers(k):
            if src in inside:
                out.append((src, k))
    return out


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) <= 1e-9 * max(1.0, abs(x)) else x


def tighten_bounds(
    g: TensorProgram,
    d: int,
    epsilon: float = DEFAULT_EPSILON,
    comp: Mapping[str, float] | None = None,
    ops: Sequence[str] | None = None,
) -> dict[str, tuple[int, int]]:
    """Per-op stage range from ancestor and descendant workload.

    With ``tps`` the ideal per-stage work, op ``i`` cannot start before
    stage ``floor(anc_i / tps - eps)`` and needs ``ceil((comp_i + desc_i) /
    tps - eps)`` stages for itself and everything after it, which caps it
    at ``d`` minus that count.  ``comp`` defaults to op flops.
    """
    ops = list(ops if ops is not None else partition_ops(g))
    if d < 1:
        raise ValueError("d must be >= 1")
    w = np.array([float(comp[k]) if comp is not None else float(g[k].flops) for k in ops])
    total = float(w.sum())
    if total <= 0:
        return {k: (0, d - 1) for k in ops}
    tps = total / d
    anc = ancestor_matrix(g, ops)
    anc_sum = anc.astype(np.float64) @ w
    desc_sum = anc.T.astype(np.float64) @ w
    bounds = {}
    for n, k in enumerate(ops):
        lo = math.floor(_snap(anc_sum[n] / tps - epsilon))
        need = math.ceil(_snap((w[n] + desc_sum[n]) / tps - epsilon))
        bounds[k] = (max(0, lo), min(d - 1, d - need))
    return bounds


def _edge_bytes(g: TensorProgram, src: str, sizes: Mapping[str, float] | None) -> float:
    if sizes is not None and src in sizes:
        return float(sizes[src])
    return float(g[src].output_shape.nbytes)


def build_stage_ilp(
    g: TensorProgram,
    d: int,
    epsilon: float | None = DEFAULT_EPSILON,
    comp: Mapping[str, float] | None = None,
    ops: Sequence[str] | None = None,
    sizes: Mapping[str, float] | None = None,
    strengthen: bool = True,
):
    """0-1 stage program; ``epsilon=None`` disables tightening.

    Besides the big-M rows, ``strengthen`` adds for every edge and stage
    threshold ``s`` the rows ``[B_j >= s] >= [B_i >= s]`` and
    ``F_ij >= [B_j >= s] - [B_i >= s]``.

    Returns ``(problem, y, f, bounds)`` where ``y[op]`` maps stage -> var
    and ``f[(i, j)]`` is the cut indicator of edge ``i -> j``.
    """
    ops = list(ops if ops is not None else partition_ops(g))
    if epsilon is None:
        bounds = {k: (0, d - 1) for k in ops}
    else:
        bounds = tighten_bounds(g, d, epsilon, comp, ops)
    bad = [k for k, (lo, hi) in bounds.items() if lo > hi]
    if bad:
        raise StageInfeasibleError(
            f"no stage fits {len(bad)} op(s) (e.g. {bad[0]!r}) at epsilon={epsilon}; raise the tolerance"
        )
    big_m = d - 1
    p = ilp.IlpProblem("stages")
    y: dict[str, dict[int, int]] = {}
    for k in ops:
        lo, hi = bounds[k]
        idx = p.add_vars([f"y_{k}_{s}" for s in range(lo, hi + 1)])
        y[k] = {s: int(v) for s, v in zip(range(lo, hi + 1), idx)}
        p.add_constraint({v: 1.0 for v in y[k].values()}, "=", 1.0)
    f: dict[tuple[str, str], int] = {}
    for i, j in _edges(g, ops):
        f[(i, j)] = p.add_var(f"f_{i}_{j}", 0, 1, True, _edge_bytes(g, i, sizes))
        diff: dict[int, float] = {}
        for s, v in y[j].items():
            diff[v] = diff.get(v, 0.0) + s
        for s, v in y[i].items():
            diff[v] = diff.get(v, 0.0) - s
        p.add_constraint(diff, ">=", 0.0)  # precedence
        p.add_constraint({**diff, f[(i, j)]: -1.0}, ">=", 0.0)  # F <= B_j - B_i
        p.add_constraint({**diff, f[(i, j)]: -float(big_m)}, "<=", 0.0)  # B_j - B_i <= M F
        if strengthen:
            # valid per-threshold rows on [B >= s]; same integer optimum, tighter LP bound
            for s in range(1, d):
                at_least: dict[int, float] = {}
                for t, v in y[j].items():
                    if t >= s:
                        at_least[v] = at_least.get(v, 0.0) + 1.0
                for t, v in y[i].items():
                    if t >= s:
                        at_least[v] = at_least.get(v, 0.0) - 1.0
                at_least = {v: c for v, c in at_least.items() if c}
                if not at_least:
                    continue
                p.add_constraint(at_least, ">=", 0.0)
                p.add_constraint({**at_least, f[(i, j)]: -1.0}, "<=", 0.0)
    for s in range(d):
        users = {y[k][s]: 1.0 for k in ops if s in y[k]}
        if not users:
            raise StageInfeasibleError(
                f"no operator may be placed in stage {s} at epsilon={epsilon}; raise the tolerance"
            )
        p.add_constraint(users, ">=", 1.0)
    return p, y, f, bounds


def assign_stages(
    g: TensorProgram,
    config: PipelineConfig,
    comp: Mapping[str, float] | None = None,
    sizes: Mapping[str, float] | None = None,
    time_limit: float | None = 60.0,
    tighten: bool = True,
) -> StageAssignment:
    """Optimal stage split of the partitioned ops, extended to the whole program."""
    d = config.stages
    ops = partition_ops(g)
    if len(ops) < d:
        raise StageInfeasibleError(f"{len(ops)} ops cannot fill {d} stages")
    p, y, f, bounds = build_stage_ilp(g, d, config.epsilon if tighten else None, comp, ops, sizes)
    sol = ilp.solve(p, time_limit)
    if sol.status == ilp.INFEASIBLE:
        raise StageInfeasibleError(f"stage program infeasible at epsilon={config.epsilon}; raise the tolerance")
    stage = {k: next(s for s, v in y[k].items() if sol.x[v] > 0.5) for k in ops}
    full = extend_assignment(g, stage)
    weights = {k: float(comp[k]) if comp is not None and k in comp else float(g[k].flops) for k in g.topo}
    per_stage = [0.0] * d
    for k, s in full.items():
        per_stage[s] += weights.get(k, 0.0)
    cut = sum(_edge_bytes(g, i, sizes) for (i, j) in f if stage[i] != stage[j])
    return StageAssignment(full, d, cut, per_stage, sol.status, bounds, p.counts())


def extend_assignment(g: TensorProgram, stage: Mapping[str, int]) -> dict[str, int]:
    """Place the ops not partitioned directly.

    Backward ops follow the forward op they differentiate (``origin``),
    other ops go to the latest stage among their placed inputs, and
    leftover sources (optimizer state) go to their earliest consumer.
    """
    out = dict(stage)
    for k in g.topo:
        if k in out:
            continue
        op = g[k]
        origin = op.attrs.get("origin")
        if origin in out:
            out[k] = out[origin]
            continue
        alias = op.attrs.get("alias")
        if alias in out:
            out[k] = out[alias]
            continue
        placed = [out[s] for s in op.inputs if s in out]
        if placed:
            out[k] = max(placed)
    for k in reversed(g.topo):
        if k not in out:
            cons = [out[c] for c in g.consumers(k) if c in out]
            out[k] = min(cons) if cons else 0
    return {k: out[k] for k in g.topo}


def stage_program(g: TensorProgram, stage: Mapping[str, int], s: int) -> TensorProgram:
    """Ops of stage ``s``; values produced elsewhere enter as ``Input`` ops.

    Outputs are the program outputs placed in the stage plus every value
    consumed by another stage.
    """
    mine = [k for k in g.topo if stage[k] == s]
    mine_set = set(mine)
    proxies: dict[str, Operator] = {}
    for k in mine:
        for src in g[k].inputs:
            if src not in mine_set and src not in proxies:
                shape: TensorShape = g[src].output_shape
                proxies[src] = Operator(src, "Input", (), shape, {"proxy": True})
    ops = list(proxies.values()) + [g[k] for k in mine]
    outs = [k for k in mine if k in g.outputs or any(stage[c] != s for c in g.consumers(k))]
    # local sinks too, so every op stays reachable from an output
    outs += [k for k in mine if not any(stage[c] == s for c in g.consumers(k))]
    return TensorProgram(ops, list(dict.fromkeys(outs)))
