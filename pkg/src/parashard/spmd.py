"""Strategy search on one mesh axis and its multi-axis driver.

The objective is the sum of per-op compute time and per-edge resharding
time.  ``search_o3`` solves it exactly over the whole graph after folding
cone interiors; ``search_o2`` additionally cuts the graph into segments at
critical nodes and chains the segment optima with a DP.
"""

from __future__ import annotations

import bisect
import logging
import math
import time
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ilp
from .ir import BackboneAnalysis, TensorProgram, compute_backbone
from .sharding import (
    REPLICATED,
    DeviceMesh,
    ProgramView,
    Shard,
    Strategy,
    generate_candidates,
    reshard_cost,
)

log = logging.getLogger(__name__)

__all__ = [
    "CostGraph",
    "Cone",
    "MemoryBudget",
    "MemoryInfeasibleError",
    "MemoryResult",
    "SearchResult",
    "SpmdPlan",
    "build_cost_graph",
    "build_ilp",
    "detect_cones",
    "solve_cone",
    "search_o3",
    "search_o2",
    "apply_memory_constraint",
    "memory_estimate",
    "search_spmd",
]

ENUM_LIMIT = 200_000


# --------------------------------------------------------------------------
# cost graph


@dataclass
class LinkCost:
    src: int
    dst: int
    matrix: np.ndarray  # [src choice, dst choice] seconds
    op_link: object = None


class CostGraph:
    """Unary compute costs and pairwise resharding costs over candidates."""

    def __init__(self, view: ProgramView, candidates: Mapping[str, Sequence[Strategy]],
                 mesh: DeviceMesh, axis: int):
        self.view = view
        self.mesh = mesh
        self.axis = axis
        self.ops = list(view.topo)
        self.index = {k: i for i, k in enumerate(self.ops)}
        self.cands: list[list[Strategy]] = []
        for k in self.ops:
            c = list(candidates.get(k, ()))
            if not c:
                raise ValueError(f"operator {k!r} has no sharding candidate")
            self.cands.append(c)
        flops_rate = mesh.device_flops
        self.unary = [
            np.array([view.ops[k].flops / s.divisor / flops_rate for s in c], dtype=float)
            for k, c in zip(self.ops, self.cands)
        ]
        cache: dict = {}
        self.links: list[LinkCost] = []
        self.pairs: dict[tuple[int, int], np.ndarray] = {}
        for ln in view.links:
            a, b = self.index[ln.src], self.index[ln.dst]
            m = np.empty((len(self.cands[a]), len(self.cands[b])))
            for ja, sa in enumerate(self.cands[a]):
                for jb, sb in enumerate(self.cands[b]):
                    req = sb.out if ln.slot < 0 else sb.ins[ln.slot]
                    key = (sa.out, req, ln.shape)
                    if key not in cache:
                        cache[key] = reshard_cost(sa.out, req, ln.shape, mesh, axis).seconds
                    m[ja, jb] = cache[key]
            self.links.append(LinkCost(a, b, m, ln))
            if a == b:
                self.unary[a] = self.unary[a] + np.diag(m)
                continue
            key = (a, b) if a < b else (b, a)
            mm = m if a < b else m.T
            self.pairs[key] = self.pairs[key] + mm if key in self.pairs else mm.copy()

    def __len__(self) -> int:
        return len(self.ops)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.cands]

    def evaluate(self, choice: Sequence[int]) -> float:
        total = sum(float(u[j]) for u, j in zip(self.unary, choice))
        for (a, b), m in self.pairs.items():
            total += float(m[choice[a], choice[b]])
        return total

    def breakdown(self, choice: Sequence[int]) -> dict:
        """Compute seconds, comm seconds/bytes and collective counts."""
        comp = 0.0
        for k, j in zip(self.ops, choice):
            comp += self.view.ops[k].flops / self.cands[self.index[k]][j].divisor / self.mesh.device_flops
        comm_s, comm_b = 0.0, 0.0
        counts: Counter = Counter()
        for lc in self.links:
            ln = lc.op_link
            sa = self.cands[lc.src][choice[lc.src]]
            sb = self.cands[lc.dst][choice[lc.dst]]
            req = sb.out if ln.slot < 0 else sb.ins[ln.slot]
            rc = reshard_cost(sa.out, req, ln.shape, self.mesh, self.axis)
            if rc.collective != "None":
                counts[rc.collective] += 1
                comm_s += rc.seconds
                comm_b += rc.bytes
        return {"comp_seconds": comp, "comm_seconds": comm_s, "comm_bytes": comm_b,
                "collectives": dict(sorted(counts.items()))}

    def link_costs(self, choice: Sequence[int]) -> dict[str, list[float]]:
        """Per-op ``[comm seconds, comm bytes]`` of the reshards feeding it."""
        out = {k: [0.0, 0.0] for k in self.ops}
        for lc in self.links:
            ln = lc.op_link
            sa = self.cands[lc.src][choice[lc.src]]
            sb = self.cands[lc.dst][choice[lc.dst]]
            req = sb.out if ln.slot < 0 else sb.ins[ln.slot]
            rc = reshard_cost(sa.out, req, ln.shape, self.mesh, self.axis)
            acc = out[self.ops[lc.dst]]
            acc[0] += rc.seconds
            acc[1] += rc.bytes
        return out


def build_cost_graph(g: "TensorProgram | ProgramView", candidates, mesh: DeviceMesh, axis: int = 0) -> CostGraph:
    view = g if isinstance(g, ProgramView) else ProgramView.from_program(g)
    return CostGraph(view, candidates, mesh, axis)


# --------------------------------------------------------------------------
# factor store + exact elimination


class _Factors:
    """Mutable unary/pairwise factors over a subset of cost-graph nodes."""

    def __init__(self, unary: Mapping[int, np.ndarray], pairs: Mapping[tuple[int, int], np.ndarray]):
        self.unary = {k: np.array(v, dtype=float) for k, v in unary.items()}
        self.pairs: dict[tuple[int, int], np.ndarray] = {}
        self.adj: dict[int, set[int]] = {k: set() for k in self.unary}
        for (a, b), m in pairs.items():
            if a in self.unary and b in self.unary:
                self.add_pair(a, b, m)
        self.offset = 0.0

    @classmethod
    def from_graph(cls, cg: CostGraph, nodes=None) -> "_Factors":
        nodes = range(len(cg)) if nodes is None else nodes
        return cls({i: cg.unary[i] for i in nodes}, cg.pairs)

    def get(self, a: int, b: int) -> np.ndarray:
        return self.pairs[(a, b)] if a < b else self.pairs[(b, a)].T

    def add_pair(self, a: int, b: int, m: np.ndarray) -> None:
        key, mm = ((a, b), m) if a < b else ((b, a), m.T)
        if key in self.pairs:
            self.pairs[key] = self.pairs[key] + mm
        else:
            self.pairs[key] = np.array(mm, dtype=float)
            self.adj[a].add(b)
            self.adj[b].add(a)

    def drop(self, v: int) -> None:
        for u in self.adj.pop(v):
            self.adj[u].discard(v)
            self.pairs.pop((u, v) if u < v else (v, u))
        del self.unary[v]


@dataclass
class _Elim:
    node: int
    nbrs: tuple[int, ...]
    argmin: np.ndarray  # indexed by neighbour choices


def _eliminate(f: _Factors, can_eliminate) -> list[_Elim]:
    """Fold away nodes of degree <= 2 allowed by ``can_eliminate`` (exact)."""
    records: list[_Elim] = []
    queue = deque(sorted(v for v in f.unary if len(f.adj[v]) <= 2 and can_eliminate(v)))
    pending = set(queue)
    while queue:
        v = queue.popleft()
        pending.discard(v)
        if v not in f.unary or len(f.adj[v]) > 2 or not can_eliminate(v):
            continue
        nbrs = tuple(sorted(f.adj[v]))
        u = f.unary[v]
        if not nbrs:
            j = int(np.argmin(u))
            f.offset += float(u[j])
            records.append(_Elim(v, (), np.array(j)))
        elif len(nbrs) == 1:
            (p,) = nbrs
            t = u[None, :] + f.get(p, v)  # [p, v]
            records.append(_Elim(v, nbrs, np.argmin(t, axis=1)))
            f.unary[p] = f.unary[p] + t.min(axis=1)
        else:
            p, q = nbrs
            t = u[None, :, None] + f.get(p, v)[:, :, None] + f.get(v, q)[None, :, :]  # [p, v, q]
            records.append(_Elim(v, nbrs, np.argmin(t, axis=1)))
            f.drop(v)
            f.add_pair(p, q, t.min(axis=1))
            for w in nbrs:
                if w not in pending and len(f.adj[w]) <= 2 and can_eliminate(w):
                    pending.add(w)
                    queue.append(w)
            continue
        f.drop(v)
        for w in nbrs:
            if w not in pending and len(f.adj[w]) <= 2 and can_eliminate(w):
                pending.add(w)
                queue.append(w)
    return records


def _back_substitute(records: Sequence[_Elim], choice: dict[int, int]) -> None:
    for r in reversed(records):
        if not r.nbrs:
            choice[r.node] = int(r.argmin)
        else:
            choice[r.node] = int(r.argmin[tuple(choice[n] for n in r.nbrs)])


def _enumerate_min(f: _Factors, nodes: Sequence[int],
                   fixed: Mapping[int, int] | None = None) -> tuple[float, dict[int, int]]:
    """Exhaustive minimum of the factors restricted to ``nodes``.

    Nodes with a single choice (or listed in ``fixed``) are conditioned
    out first, so the dense table only spans genuinely free nodes.
    """
    nodes = list(nodes)
    inside = set(nodes)
    fixed = {v: j for v, j in (fixed or {}).items() if v in inside}
    for v in nodes:
        if v not in fixed and len(f.unary[v]) == 1:
            fixed[v] = 0
    free = [v for v in nodes if v not in fixed]
    pos = {v: i for i, v in enumerate(free)}
    shape = [len(f.unary[v]) for v in free]
    n = len(free)
    const = f.offset + sum(float(f.unary[v][j]) for v, j in fixed.items())
    unary = {v: f.unary[v].copy() for v in free}
    pairs = []
    for (a, b), m in f.pairs.items():
        fa, fb = a in fixed, b in fixed
        if fa and fb:
            const += float(m[fixed[a], fixed[b]])
        elif fa and b in pos:
            unary[b] += m[fixed[a], :]
        elif fb and a in pos:
            unary[a] += m[:, fixed[b]]
        elif a in pos and b in pos:
            pairs.append((a, b, m))
    choice = {v: fixed[v] for v in nodes if v in fixed}
    if not free:
        return const, choice
    total = np.zeros(shape)
    for v in free:
        sh = [1] * n
        sh[pos[v]] = shape[pos[v]]
        total = total + unary[v].reshape(sh)
    for a, b, m in pairs:
        sh = [1] * n
        sh[pos[a]], sh[pos[b]] = shape[pos[a]], shape[pos[b]]
        mm = m if pos[a] < pos[b] else m.T
        total = total + mm.reshape(sh)
    flat = int(np.argmin(total))
    idx = np.unravel_index(flat, shape)
    choice.update({v: int(i) for v, i in zip(free, idx)})
    return float(total.flat[flat]) + const, choice


def _factor_ilp(f: _Factors, nodes: Sequence[int], name: str, marginal: bool = True,
                fixed: Mapping[int, int] | None = None):
    p = ilp.IlpProblem(name)
    p.objective_offset = f.offset
    xs: dict[int, np.ndarray] = {}
    for v in nodes:
        u = f.unary[v]
        xs[v] = p.add_vars([f"x_{v}_{j}" for j in range(len(u))], 0.0, 1.0, True, u)
    one = [np.ones(len(xs[v])) for v in nodes]
    p.add_rows([xs[v] for v in nodes], one, "=", np.ones(len(nodes)))
    if fixed:
        fx = [v for v in nodes if v in fixed]
        p.add_rows([np.array([xs[v][fixed[v]]]) for v in fx], [np.ones(1)] * len(fx), "=", np.ones(len(fx)))
    aset = set(nodes)
    avars: dict[tuple[int, int], np.ndarray] = {}
    for (a, b), m in sorted(f.pairs.items()):
        if a not in aset or b not in aset:
            continue
        if marginal and not np.any(m):
            continue
        na, nb = m.shape
        names = [f"a_{a}_{b}_{j1}_{j2}" for j1 in range(na) for j2 in range(nb)]
        grid = p.add_vars(names, 0.0, 1.0, False, m.ravel()).reshape(na, nb)
        if marginal:
            cols = [np.append(grid[j1, :], xs[a][j1]) for j1 in range(na)]
            cols += [np.append(grid[:, j2], xs[b][j2]) for j2 in range(nb)]
            vals = [np.append(np.ones(nb), -1.0)] * na + [np.append(np.ones(na), -1.0)] * nb
            p.add_rows(cols, vals, "=", np.zeros(na + nb))
        else:
            cols = [np.array([grid[j1, j2], xs[a][j1], xs[b][j2]]) for j1 in range(na) for j2 in range(nb)]
            p.add_rows(cols, [np.array([1.0, -1.0, -1.0])] * len(cols), ">=", -np.ones(len(cols)))
        avars[(a, b)] = grid
    return p, xs, avars


def _incumbent_vector(p: ilp.IlpProblem, xs, avars, choice: Mapping[int, int]) -> np.ndarray:
    x = np.zeros(p.num_vars)
    for v, cols in xs.items():
        x[cols[choice[v]]] = 1.0
    for (a, b), grid in avars.items():
        x[grid[choice[a], choice[b]]] = 1.0
    return x


def _local_search(f: _Factors, nodes: Sequence[int], passes: int = 4) -> dict[int, int]:
    choice = {v: int(np.argmin(f.unary[v])) for v in nodes}
    for _ in range(passes):
        changed = False
        for v in nodes:
            t = f.unary[v].copy()
            for u in f.adj[v]:
                if u in choice:
                    t = t + f.get(v, u)[:, choice[u]]
            j = int(np.argmin(t))
            if t[j] < t[choice[v]] - 1e-15:
                choice[v] = j
                changed = True
        if not changed:
            break
    return choice


def _solve_factors(f: _Factors, nodes: Sequence[int], name: str, time_limit: float | None,
                   fixed: Mapping[int, int] | None = None,
                   enum_limit: int = ENUM_LIMIT) -> tuple[float, dict[int, int], str]:
    """Exact minimum over ``nodes`` (enumeration when small, else ILP)."""
    nodes = list(nodes)
    fixed = dict(fixed or {})
    if math.prod(1 if v in fixed else len(f.unary[v]) for v in nodes) <= enum_limit:
        val, choice = _enumerate_min(f, nodes, fixed)
        return val, choice, ilp.OPTIMAL
    p, xs, avars = _factor_ilp(f, nodes, name, True, fixed)
    warm = _local_search(f, nodes)
    warm.update(fixed)
    sol = ilp.solve(p, time_limit, incumbent=_incumbent_vector(p, xs, avars, warm))
    if sol.status == ilp.INFEASIBLE:
        raise RuntimeError(f"{name}: strategy ILP infeasible")
    choice = {v: int(np.argmax(sol.x[cols])) for v, cols in xs.items()}
    return sol.objective_value, choice, sol.status


# --------------------------------------------------------------------------
# public ILP builder (full graph, no folding)


def build_ilp(g, candidates, mesh: DeviceMesh, axis: int = 0, formulation: str = "paper"):
    """Whole-graph 0-1 program.

    ``formulation="paper"``: every edge and choice pair gets an auxiliary
    ``A >= X1 + X2 - 1``.  ``"marginal"``: the auxiliaries of an edge are
    instead tied to both endpoint choices by equality (tighter relaxation,
    same integer optima).  Returns ``(problem, x_vars, a_vars, cost_graph)``.
    """
    if formulation not in ("paper", "marginal"):
        raise ValueError(f"unknown formulation {formulation!r}")
    cg = candidates if isinstance(candidates, CostGraph) else build_cost_graph(g, candidates, mesh, axis)
    f = _Factors.from_graph(cg)
    p, xs, avars = _factor_ilp(f, range(len(cg)), "spmd", formulation == "marginal")
    return p, xs, avars, cg


# --------------------------------------------------------------------------
# cones


@dataclass(frozen=True)
class Cone:
    root: str
    members: tuple[str, ...]  # topological order, root last
    synthetic: bool = False


def _distinct_producers(view: ProgramView, k: str) -> int:
    return len(set(view.ops[k].inputs))


def detect_cones(g: "TensorProgram | ProgramView", extra_roots=()) -> list[Cone]:
    """Partition ops into cones.

    Multi-input ops (and ``extra_roots``) are roots.  Scanning consumers
    before producers, each root absorbs its single-input producers
    transitively until another root or an already-claimed op.  Ops left
    unclaimed start synthetic cones of their own.
    """
    view = g if isinstance(g, ProgramView) else ProgramView.from_program(g)
    order = {k: i for i, k in enumerate(view.topo)}
    extra = set(extra_roots)
    roots = {k for k in view.topo if _distinct_producers(view, k) >= 2} | extra
    owner: dict[str, str] = {}
    cones = []
    for k in reversed(view.topo):
        if k in owner:
            continue
        owner[k] = k
        members = [k]
        stack = [k]
        while stack:
            cur = stack.pop()
            for p in dict.fromkeys(view.ops[cur].inputs):
                if p in owner or p in roots:
                    continue
                owner[p] = k
                members.append(p)
                stack.append(p)
        members.sort(key=order.__getitem__)
        cones.append(Cone(k, tuple(members), k not in roots))
    cones.sort(key=lambda c: order[c.root])
    return cones


def solve_cone(cg: CostGraph, cone: Cone, root_choice: int, time_limit: float | None = None):
    """Best member choices of ``cone`` with its root fixed.

    Only costs internal to the cone count: member compute plus resharding
    on edges with both ends inside.  Returns ``({op: choice}, cost)``.
    """
    idx = [cg.index[k] for k in cone.members]
    root = cg.index[cone.root]
    if not 0 <= root_choice < len(cg.cands[root]):
        raise IndexError(f"root {cone.root!r} has no candidate {root_choice}")
    f = _Factors.from_graph(cg, idx)
    records = _eliminate(f, lambda v: v != root)
    rest = sorted(f.unary)
    val, choice, _ = _solve_factors(f, rest, f"cone_{cone.root}", time_limit, {root: root_choice})
    _back_substitute(records, choice)
    return {cg.ops[i]: choice[i] for i in idx}, val


# --------------------------------------------------------------------------
# searches


@dataclass
class SearchResult:
    choice: dict[str, Strategy]
    index: dict[str, int]
    cost: float
    status: str
    stats: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    link_costs: dict = field(default_factory=dict, repr=False)


def _fold_cones(cg: CostGraph, cones: Sequence[Cone]):
    cone_of = {}
    for ci, c in enumerate(cones):
        for k in c.members:
            cone_of[cg.index[k]] = ci
    roots = {cg.index[c.root] for c in cones}
    f = _Factors.from_graph(cg)

    def interior(v: int) -> bool:
        return v not in roots and all(cone_of[u] == cone_of[v] for u in f.adj[v])

    records = _eliminate(f, interior)
    return f, records, cone_of


def _result(cg: CostGraph, choice: Mapping[int, int], status: str, stats: dict) -> SearchResult:
    vec = [choice[i] for i in range(len(cg))]
    return SearchResult(
        {k: cg.cands[i][vec[i]] for i, k in enumerate(cg.ops)},
        {k: vec[i] for i, k in enumerate(cg.ops)},
        cg.evaluate(vec),
        status,
        stats,
        cg.breakdown(vec),
        cg.link_costs(vec),
    )


def search_o3(g, candidates, mesh: DeviceMesh, axis: int = 0, time_limit: float | None = 60.0,
              cost_graph: CostGraph | None = None, enum_limit: int = ENUM_LIMIT) -> SearchResult:
    """Whole-graph optimum: cone interiors folded exactly, then one ILP."""
    t0 = time.perf_counter()
    cg = cost_graph or build_cost_graph(g, candidates, mesh, axis)
    cones = detect_cones(cg.view)
    f, records, _ = _fold_cones(cg, cones)
    rest = sorted(f.unary)
    val, choice, status = _solve_factors(f, rest, "spmd_o3", time_limit, None, enum_limit)
    _back_substitute(records, choice)
    stats = {"level": 3, "ops": len(cg), "cones": len(cones), "skeleton": len(rest),
             "seconds": time.perf_counter() - t0}
    res = _result(cg, choice, status, stats)
    if abs(res.cost - val) > 1e-9 * max(1.0, abs(val)):
        log.debug("o3 objective %.12g vs re-evaluated %.12g", val, res.cost)
    return res


def search_o2(g, candidates, mesh: DeviceMesh, axis: int = 0, time_limit: float | None = 60.0,
              backbone: BackboneAnalysis | None = None, cost_graph: CostGraph | None = None,
              enum_limit: int = ENUM_LIMIT) -> SearchResult:
    """Three-level search: cone folding, per-segment solves, chain DP.

    Critical nodes, ordered by level, end segments.  Segment ``k`` is solved
    once per choice of its closing pivot with the previous pivot free and
    carrying the best cost of everything before it.  Edges that jump over a
    pivot are charged in the producer's segment at their worst case over
    consumer choices, so the chained value bounds the true cost from above;
    the reported cost is the true objective of the assembled choice.
    """
    t0 = time.perf_counter()
    cg = cost_graph or build_cost_graph(g, candidates, mesh, axis)
    view = cg.view
    if backbone is None:
        if view.program is None:
            raise ValueError("search_o2 needs the program or a BackboneAnalysis")
        backbone = compute_backbone(view.program)
    pivots_ops = [k for k in backbone.critical_order() if k in cg.index]
    cones = detect_cones(view, extra_roots=pivots_ops)
    f, records, cone_of = _fold_cones(cg, cones)

    pivots = [cg.index[k] for k in pivots_ops]
    levels = [backbone.earliest[k] for k in pivots_ops]
    nseg = len(pivots) + 1
    seg_of: dict[int, int] = {}
    for c in cones:
        s = bisect.bisect_left(levels, backbone.earliest[c.root])
        for k in c.members:
            seg_of[cg.index[k]] = s
    for s, v in enumerate(pivots):
        seg_of[v] = s

    # cross-segment pairs that are not pivot -> next segment get a bound
    bound_add: dict[int, np.ndarray] = defaultdict(lambda: 0.0)
    exact_pairs: dict[int, dict] = defaultdict(dict)

    def exact_segment(a: int, b: int):
        sa, sb = seg_of[a], seg_of[b]
        if sa == sb:
            return sa
        for x, sx, sy in ((a, sa, sb), (b, sb, sa)):
            if sy == sx + 1 and sx < len(pivots) and pivots[sx] == x:
                return sy
        return None

    for key, m in f.pairs.items():
        s = exact_segment(*key)
        if s is not None:
            exact_pairs[s][key] = m
    cross = 0
    for lc in cg.links:
        a, b = lc.src, lc.dst
        if a == b or exact_segment(a, b) is not None:
            continue
        cross += 1
        bound_add[a] = bound_add[a] + lc.matrix.max(axis=1)

    members: dict[int, list[int]] = defaultdict(list)
    for v in sorted(f.unary):
        members[seg_of[v]].append(v)

    value = None  # best cost so far per choice of the previous pivot
    tables: list[dict[int, dict[int, int]]] = []
    status = ilp.OPTIMAL
    ilp_calls = 0
    for s in range(nseg):
        prev = pivots[s - 1] if s > 0 else None
        own = pivots[s] if s < len(pivots) else None
        nodes = list(members[s])
        unary = {v: f.unary[v] + bound_add[v] for v in nodes}
        if prev is not None:
            unary[prev] = value
            nodes = [prev] + nodes
        sf = _Factors(unary, exact_pairs[s])
        keep = {prev, own}
        rec = _eliminate(sf, lambda v: v not in keep)
        rest = sorted(sf.unary)
        table: dict[int, dict[int, int]] = {}
        if own is None:
            val, ch, st = _solve_factors(sf, rest, f"spmd_o2_seg{s}", time_limit, None, enum_limit)
            ilp_calls += 1
            _back_substitute(rec, ch)
            table[0] = ch
            value = np.array([val])
            if st != ilp.OPTIMAL:
                status = ilp.FEASIBLE
        else:
            vals = np.empty(len(cg.cands[own]))
            for j in range(len(vals)):
                val, ch, st = _solve_factors(sf, rest, f"spmd_o2_seg{s}_{j}", time_limit, {own: j}, enum_limit)
                ilp_calls += 1
                _back_substitute(rec, ch)
                table[j] = ch
                vals[j] = val
                if st != ilp.OPTIMAL:
                    status = ilp.FEASIBLE
            value = vals
        tables.append(table)

    choice: dict[int, int] = {}
    j = 0
    for s in range(nseg - 1, -1, -1):
        own = pivots[s] if s < len(pivots) else None
        ch = tables[s][j if own is not None else 0]
        for v, c in ch.items():
            if s > 0 and v == pivots[s - 1]:
                continue
            choice[v] = c
        if s > 0:
            j = ch[pivots[s - 1]]
    _back_substitute(records, choice)
    stats = {"level": 2, "ops": len(cg), "cones": len(cones), "critical": len(pivots),
             "segments": sum(1 for s in range(nseg) if members[s] or s < len(pivots)),
             "cross_links_bounded": cross, "subproblems": ilp_calls,
             "seconds": time.perf_counter() - t0}
    return _result(cg, choice, status, stats)


# --------------------------------------------------------------------------
# memory


class MemoryInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryBudget:
    limit_bytes: float
    state_multiplier: float = 3.0

    def __post_init__(self):
        if not self.limit_bytes > 0:
            raise ValueError("memory limit must be > 0")
        if self.state_multiplier < 0:
            raise ValueError("state multiplier must be >= 0")


@dataclass
class MemoryResult:
    candidates: dict[str, list[Strategy]]
    k: int
    estimate: float
    forced: list[str]
    order: list[str]


def _param_order(view: ProgramView, candidates) -> list[str]:
    params = [k for k in view.topo if view.ops[k].kind == "Parameter"]
    shardable = [k for k in params if any(isinstance(s.out, Shard) for s in candidates[k])]
    return sorted(shardable, key=lambda k: (-view.ops[k].output_shape.nbytes, view.topo.index(k)))


def _estimate(view: ProgramView, forced: set[str], budget: MemoryBudget, degree: int) -> float:
    total = 0.0
    for k in view.topo:
        if view.ops[k].kind == "Parameter":
            b = view.ops[k].output_shape.nbytes * (1.0 + budget.state_multiplier)
            total += b / degree if k in forced else b
    return total


def apply_memory_constraint(g, candidates, budget: MemoryBudget, degree: int,
                            force_k: int | None = None) -> MemoryResult:
    """Force the largest parameters to be partitioned until the estimate fits.

    Parameters are ranked by size (descending); the top ``k`` lose their
    Replicated candidates and are assumed to occupy ``1/degree`` of their
    bytes per device.  ``k`` is the smallest value whose estimate (parameter
    plus optimizer-state bytes) fits.  ``force_k`` pins ``k`` instead and
    raises ``MemoryInfeasibleError`` if that many forced parameters do not fit.
    """
    view = g if isinstance(g, ProgramView) else ProgramView.from_program(g)
    order = _param_order(view, candidates)
    if force_k is not None:
        ks = [force_k]
    else:
        ks = list(range(len(order) + 1))
    for k in ks:
        forced = set(order[:k])
        est = _estimate(view, forced, budget, degree)
        if force_k is not None and est > budget.limit_bytes:
            raise MemoryInfeasibleError(
                f"forcing {k} parameter(s) leaves {est:.0f} bytes per device, budget {budget.limit_bytes:.0f}"
            )
        if est <= budget.limit_bytes:
            pruned = {
                op: ([s for s in c if s.out != REPLICATED] if op in forced else list(c))
                for op, c in candidates.items()
            }
            return MemoryResult(pruned, k, est, order[:k], order)
    raise MemoryInfeasibleError(
        f"parameters need {_estimate(view, set(order), budget, degree):.0f} bytes per device even with "
        f"all {len(order)} shardable parameters partitioned {degree} ways; budget is {budget.limit_bytes:.0f}"
    )


def memory_estimate(view: ProgramView, budget: MemoryBudget) -> float:
    """Per-device parameter + optimizer-state bytes under ``view``'s local shapes."""
    return sum(
        view.ops[k].output_shape.nbytes * (1.0 + budget.state_multiplier)
        for k in view.topo
        if view.ops[k].kind == "Parameter"
    )


# --------------------------------------------------------------------------
# multi-axis driver


@dataclass
class SpmdPlan:
    axes: list[int]
    choices: list[dict[str, Strategy]]
    results: list[SearchResult]
    local_view: ProgramView
    memory_k: int | None = None
    memory_bytes: float | None = None

    @property
    def comm_seconds(self) -> float:
        return sum(r.breakdown["comm_seconds"] for r in self.results)

    @property
    def comm_bytes(self) -> float:
        return sum(r.breakdown["comm_bytes"] for r in self.results)

    @property
    def comp_seconds(self) -> float:
        return self.results[-1].breakdown["comp_seconds"] if self.results else 0.0

    def op_costs(self, device_flops: float) -> dict[str, tuple[float, float, float]]:
        """Per-op ``(compute s, comm s, comm bytes)`` summed over the mesh axes."""
        comm = {k: [0.0, 0.0] for k in self.local_view.topo}
        for r in self.results:
            for k, (sec, nb) in r.link_costs.items():
                comm[k][0] += sec
                comm[k][1] += nb
        return {
            k: (self.local_view.ops[k].flops / device_flops, comm[k][0], comm[k][1])
            for k in self.local_view.topo
        }

    def collectives(self) -> dict[str, int]:
        c: Counter = Counter()
        for r in self.results:
            c.update(r.breakdown["collectives"])
        return dict(sorted(c.items()))


def search_spmd(
    g: TensorProgram,
    mesh: DeviceMesh,
    axes: Sequence[int] | None = None,
    opt_level: int = 3,
    budget: MemoryBudget | None = None,
    time_limit: float | None = 60.0,
    force_k: int | None = None,
    candidate_hook=None,
) -> SpmdPlan:
    """Search each SPMD mesh axis in turn on the view left by the previous one."""
    axes = list(range(len(mesh.dims))) if axes is None else list(axes)
    view = ProgramView.from_program(g)
    backbone = compute_backbone(g) if opt_level == 2 else None
    degree = math.prod(mesh.dims[a] for a in axes)
    choices, results = [], []
    forced: list[str] = []
    k = None
    for t, axis in enumerate(axes):
        cands = generate_candidates(view, mesh, axis, pin_index=t)
        if budget is not None:
            if t == 0:
                mem = apply_memory_constraint(view, cands, budget, degree, force_k)
                cands, k, forced = mem.candidates, mem.k, mem.forced
            else:
                for op in forced:
                    sharded = [s for s in cands[op] if s.out != REPLICATED]
                    if sharded:
                        cands[op] = sharded
        if candidate_hook is not None:
            candidate_hook(axis, cands)
        if opt_level == 2:
            res = search_o2(view, cands, mesh, axis, time_limit, backbone)
        elif opt_level == 3:
            res = search_o3(view, cands, mesh, axis, time_limit)
        else:
            raise ValueError(f"unsupported opt level {opt_level}")
        choices.append(res.choice)
        results.append(res)
        view = view.localize(res.choice, mesh.dims[axis])
    plan = SpmdPlan(axes, choices, results, view, k)
    if budget is not None:
        plan.memory_bytes = memory_estimate(view, budget)
        if plan.memory_bytes > budget.limit_bytes * (1 + 1e-12):
            raise MemoryInfeasibleError(
                f"plan needs {plan.memory_bytes:.0f} bytes per device, budget {budget.limit_bytes:.0f}"
            )
    return plan
