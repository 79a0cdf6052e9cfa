"""Small exact integer linear programming: depth-first branch and bound.

LP relaxations are solved by scipy's HiGHS interface; branching, pruning,
incumbent bookkeeping and the final feasibility re-check are done here.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

log = logging.getLogger(__name__)

__all__ = ["IlpProblem", "IlpSolution", "IlpError", "IlpTimeout", "solve", "to_lp_text", "set_dump_dir"]

OPTIMAL = "Optimal"
FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"

_SENSES = {"<=": "<=", "≤": "<=", ">=": ">=", "≥": ">=", "=": "==", "==": "=="}


_dump = {"dir": None, "count": 0}


def set_dump_dir(path) -> None:
    """Write every problem passed to ``solve`` as LP text under ``path`` (None disables)."""
    _dump["dir"] = None if path is None else Path(path)
    _dump["count"] = 0
    if path is not None:
        _dump["dir"].mkdir(parents=True, exist_ok=True)


class IlpError(ValueError):
    """Malformed problem."""


class IlpTimeout(RuntimeError):
    """Time limit hit before any feasible assignment was found."""


class IlpProblem:
    """Minimisation problem built variable by variable.

    Variables are integral unless declared continuous; binaries are integers
    with bounds [0, 1].  Constraints are stored as sparse triplets, so large
    problems can be built in bulk with ``add_vars`` / ``add_rows``.
    """

    def __init__(self, name: str = "problem"):
        self.name = name
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.cost: list[float] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.objective_offset = 0.0
        self._index: dict[str, int] = {}
        self._r: list[np.ndarray] = []
        self._c: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._csr = None

    # building -----------------------------------------------------------
    def add_var(self, name: str, lb: float = 0.0, ub: float = 1.0, integer: bool = True,
                cost: float = 0.0) -> int:
        return int(self.add_vars([name], lb, ub, integer, [cost])[0])

    def add_vars(self, names: Sequence[str], lb: float = 0.0, ub: float = 1.0, integer: bool = True,
                 costs: Sequence[float] | None = None) -> np.ndarray:
        n0 = len(self.names)
        costs = np.zeros(len(names)) if costs is None else np.asarray(costs, dtype=float)
        if len(costs) != len(names):
            raise IlpError("one cost per variable")
        if not (math.isfinite(lb) and math.isfinite(ub)) or lb > ub:
            raise IlpError(f"bad bounds [{lb}, {ub}]")
        if not np.all(np.isfinite(costs)):
            raise IlpError("non-finite objective coefficient")
        for i, nm in enumerate(names):
            if nm in self._index:
                raise IlpError(f"duplicate variable {nm!r}")
            self._index[nm] = n0 + i
        k = len(names)
        self.names.extend(names)
        self.lb.extend([float(lb)] * k)
        self.ub.extend([float(ub)] * k)
        self.integer.extend([bool(integer)] * k)
        self.cost.extend(costs.tolist())
        self._csr = None
        return np.arange(n0, n0 + k)

    def add_binary(self, name: str, cost: float = 0.0) -> int:
        return self.add_var(name, 0.0, 1.0, True, cost)

    def var(self, name: str) -> int:
        return self._index[name]

    def add_constraint(self, coeffs: "Mapping[int, float] | Iterable[tuple[int, float]]",
                       sense: str, rhs: float) -> int:
        items = list(coeffs.items() if isinstance(coeffs, Mapping) else coeffs)
        cols = np.array([j for j, _ in items], dtype=np.int64)
        vals = np.array([a for _, a in items], dtype=float)
        return int(self.add_rows([cols], [vals], sense, [rhs])[0])

    def add_rows(self, cols: Sequence[np.ndarray], vals: Sequence[np.ndarray], sense: str,
                 rhs: Sequence[float]) -> np.ndarray:
        """Append one constraint per (cols, vals) pair, all with ``sense``."""
        if sense not in _SENSES:
            raise IlpError(f"unknown relation {sense!r}")
        rhs = np.asarray(rhs, dtype=float)
        if len(cols) != len(vals) or len(cols) != len(rhs):
            raise IlpError("cols, vals and rhs lengths differ")
        if not np.all(np.isfinite(rhs)):
            raise IlpError("non-finite right-hand side")
        r0 = len(self.rhs)
        n = len(self.names)
        for i, (c, v) in enumerate(zip(cols, vals)):
            c = np.asarray(c, dtype=np.int64)
            v = np.asarray(v, dtype=float)
            if c.shape != v.shape:
                raise IlpError("coefficient and column counts differ")
            if c.size and (c.min() < 0 or c.max() >= n):
                raise IlpError("constraint references undeclared variable")
            if not np.all(np.isfinite(v)):
                raise IlpError("non-finite constraint coefficient")
            self._r.append(np.full(c.size, r0 + i, dtype=np.int64))
            self._c.append(c)
            self._v.append(v)
        self.senses.extend([_SENSES[sense]] * len(rhs))
        self.rhs.extend(rhs.tolist())
        self._csr = None
        return np.arange(r0, r0 + len(rhs))

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def num_constraints(self) -> int:
        return len(self.rhs)

    def counts(self) -> dict[str, int]:
        ints = sum(self.integer)
        return {"vars": self.num_vars, "integer": ints, "continuous": self.num_vars - ints,
                "constraints": self.num_constraints}

    def matrix(self) -> sparse.csr_matrix:
        """Constraint matrix (duplicate entries summed)."""
        if self._csr is None:
            if self._r:
                r, c, v = np.concatenate(self._r), np.concatenate(self._c), np.concatenate(self._v)
            else:
                r = c = np.zeros(0, dtype=np.int64)
                v = np.zeros(0)
            self._csr = sparse.csr_matrix((v, (r, c)), shape=(self.num_constraints, self.num_vars))
        return self._csr

    @property
    def rows(self) -> list[dict[int, float]]:
        a = self.matrix()
        return [dict(zip(a.indices[a.indptr[i]:a.indptr[i + 1]].tolist(),
                         a.data[a.indptr[i]:a.indptr[i + 1]].tolist())) for i in range(a.shape[0])]

    # evaluation ---------------------------------------------------------
    def objective(self, x: Sequence[float]) -> float:
        return float(np.dot(self.cost, x)) + self.objective_offset

    def violations(self, x: Sequence[float], tol: float = 1e-6) -> list[int]:
        if not self.num_constraints:
            return []
        lhs = self.matrix() @ np.asarray(x, dtype=float)
        rhs = np.asarray(self.rhs)
        slack = tol * np.maximum(1.0, np.abs(rhs))
        sense = np.asarray(self.senses)
        bad = ((sense == "<=") & (lhs > rhs + slack)) | ((sense == ">=") & (lhs < rhs - slack)) | (
            (sense == "==") & (np.abs(lhs - rhs) > slack))
        return np.flatnonzero(bad).tolist()

    def is_feasible(self, x: Sequence[float], tol: float = 1e-6) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.num_vars,):
            return False
        if np.any(x < np.asarray(self.lb) - tol) or np.any(x > np.asarray(self.ub) + tol):
            return False
        ints = np.asarray(self.integer, dtype=bool)
        if np.any(np.abs(x[ints] - np.round(x[ints])) > tol):
            return False
        return not self.violations(x, tol)

    def _matrices(self):
        a = self.matrix()
        sense = np.asarray(self.senses)
        rhs = np.asarray(self.rhs)
        eq = np.flatnonzero(sense == "==")
        le = np.flatnonzero(sense == "<=")
        ge = np.flatnonzero(sense == ">=")
        ub_idx = np.concatenate([le, ge])
        a_ub = None
        b_ub = None
        if ub_idx.size:
            sign = np.concatenate([np.ones(le.size), -np.ones(ge.size)])
            a_ub = sparse.diags(sign) @ a[ub_idx]
            b_ub = sign * rhs[ub_idx]
        a_eq = a[eq] if eq.size else None
        b_eq = rhs[eq] if eq.size else None
        return np.asarray(self.cost, dtype=float), a_ub, b_ub, a_eq, b_eq


@dataclass
class IlpSolution:
    status: str
    objective_value: float
    x: np.ndarray | None
    names: list[str] = field(default_factory=list)
    nodes: int = 0
    bound: float = -math.inf
    history: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def assignment(self) -> dict[str, float]:
        if self.x is None:
            return {}
        return dict(zip(self.names, self.x.tolist()))

    def value(self, j: int) -> float:
        assert self.x is not None
        return float(self.x[j])


def _round_solution(p: IlpProblem, x: np.ndarray) -> np.ndarray:
    y = np.array(x, dtype=float)
    for j, is_int in enumerate(p.integer):
        if is_int:
            y[j] = float(round(y[j]))
    return np.clip(y, p.lb, p.ub)


def solve(
    p: IlpProblem,
    time_limit: float | None = 60.0,
    incumbent: Sequence[float] | None = None,
    tol: float = 1e-6,
) -> IlpSolution:
    """Minimise ``p`` exactly, or return the best assignment found in time.

    ``incumbent`` is an optional feasible starting assignment.  Nodes are
    explored depth first; the branching variable is the most fractional one
    (lowest index on ties) and the child on the side the LP leans towards is
    visited first.  Every returned assignment is re-checked against all
    constraints.
    """
    if _dump["dir"] is not None:
        _dump["count"] += 1
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in p.name)
        (_dump["dir"] / f"{_dump['count']:04d}_{safe}.lp").write_text(to_lp_text(p), encoding="utf-8")
    start = time.perf_counter()
    deadline = math.inf if time_limit is None else start + float(time_limit)
    n = p.num_vars
    if n == 0:
        ok = all(
            (s == "<=" and 0 <= r + tol) or (s == ">=" and 0 >= r - tol) or (s == "==" and abs(r) <= tol)
            for s, r in zip(p.senses, p.rhs)
        )
        status = OPTIMAL if ok else INFEASIBLE
        return IlpSolution(status, p.objective_offset if ok else math.inf, np.zeros(0) if ok else None,
                           [], 0, p.objective_offset)

    c, a_ub, b_ub, a_eq, b_eq = p._matrices()
    # LP tolerances are absolute; keep objective coefficients near unit scale
    cmax = float(np.abs(c).max()) if c.size else 0.0
    scale = 1.0 / cmax if cmax > 0 else 1.0
    c = c * scale
    integer = np.asarray(p.integer, dtype=bool)
    best_x: np.ndarray | None = None
    best = math.inf
    history: list[float] = []

    if incumbent is not None:
        x0 = _round_solution(p, np.asarray(incumbent, dtype=float))
        if p.is_feasible(x0, tol):
            best_x, best = x0, p.objective(x0)
            history.append(best)
        else:
            log.debug("%s: supplied incumbent is infeasible, ignored", p.name)

    def better(val: float) -> bool:
        if best == math.inf:
            return True
        return val < best - 1e-9 * max(abs(best), cmax, 1e-300)

    stack = [(np.asarray(p.lb, dtype=float), np.asarray(p.ub, dtype=float))]
    nodes = 0
    timed_out = False
    root_bound = -math.inf
    while stack:
        if time.perf_counter() > deadline:
            timed_out = True
            break
        lo, hi = stack.pop()
        nodes += 1
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                      bounds=np.column_stack([lo, hi]), method="highs")
        if res.status == 2:  # infeasible
            continue
        if res.status != 0:
            raise IlpError(f"{p.name}: LP relaxation failed ({res.message})")
        lp = float(res.fun) / scale + p.objective_offset
        if nodes == 1:
            root_bound = lp
        if not better(lp):
            continue
        x = res.x
        frac = np.abs(x - np.round(x))
        frac[~integer] = 0.0
        if frac.max() <= tol:
            cand = _round_solution(p, x)
            if p.is_feasible(cand, tol):
                val = p.objective(cand)
                if better(val):
                    best_x, best = cand, val
                    history.append(best)
            else:
                log.debug("%s: integral LP point fails re-check, node dropped", p.name)
            continue
        score = np.where(frac > tol, np.abs(frac - 0.5), np.inf)
        j = int(np.argmin(score))
        v = x[j]
        down_hi = hi.copy()
        down_hi[j] = math.floor(v)
        up_lo = lo.copy()
        up_lo[j] = down_hi[j] + 1
        children = []
        if down_hi[j] >= lo[j]:
            children.append((lo, down_hi))
        if up_lo[j] <= hi[j]:
            children.append((up_lo, hi))
        if len(children) == 2 and v - math.floor(v) >= 0.5:
            children.reverse()
        stack.extend(reversed(children))

    elapsed = time.perf_counter() - start
    if timed_out:
        if best_x is None:
            raise IlpTimeout(f"{p.name}: no feasible assignment within {time_limit}s")
        log.info("%s: time limit after %d nodes, incumbent %.6g", p.name, nodes, best)
        return IlpSolution(FEASIBLE, best, best_x, list(p.names), nodes, root_bound, history, elapsed)
    if best_x is None:
        return IlpSolution(INFEASIBLE, math.inf, None, list(p.names), nodes, math.inf, history, elapsed)
    return IlpSolution(OPTIMAL, best, best_x, list(p.names), nodes, best, history, elapsed)


def to_lp_text(p: IlpProblem) -> str:
    """Readable dump in the CPLEX LP style."""

    def term(a: float, name: str, first: bool) -> str:
        sign = "-" if a < 0 else ("" if first else "+")
        return f"{sign} {abs(a):.12g} {name}".strip()

    def expr(row: Mapping[int, float]) -> str:
        parts = [term(a, p.names[j], i == 0) for i, (j, a) in enumerate(sorted(row.items()))]
        return " ".join(parts) if parts else "0"

    lines = [f"\\ {p.name}", "Minimize", " obj: " + expr({j: a for j, a in enumerate(p.cost) if a}),
             "Subject To"]
    for r, (row, sense, rhs) in enumerate(zip(p.rows, p.senses, p.rhs)):
        op = "=" if sense == "==" else sense
        lines.append(f" c{r}: {expr(row)} {op} {rhs:.12g}")
    lines.append("Bounds")
    for j, name in enumerate(p.names):
        lines.append(f" {p.lb[j]:.12g} <= {name} <= {p.ub[j]:.12g}")
    bins = [nm for j, nm in enumerate(p.names) if p.integer[j] and p.lb[j] == 0 and p.ub[j] == 1]
    gens = [nm for j, nm in enumerate(p.names) if p.integer[j] and not (p.lb[j] == 0 and p.ub[j] == 1)]
    if bins:
        lines += ["Binary", " " + " ".join(bins)]
    if gens:
        lines += ["General", " " + " ".join(gens)]
    lines.append("End")
    return "\n".join(lines) + "\n"
