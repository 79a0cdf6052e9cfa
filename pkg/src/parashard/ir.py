"""Semantics-free tensor-program IR.

A program is a DAG of operators, each producing one shaped tensor.  The
module covers construction and validation, the text and JSON formats, and
the graph analyses used by the searches (topological order, reachability,
earliest/latest levels).
"""

from __future__ import annotations

import heapq
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DTYPE_BYTES",
    "KINDS",
    "IRError",
    "IRSyntaxError",
    "CycleError",
    "ShapeError",
    "DanglingReferenceError",
    "TensorShape",
    "Operator",
    "TensorProgram",
    "BackboneAnalysis",
    "parse_program",
    "parse_text",
    "parse_json",
    "to_text",
    "to_json",
    "program_to_dict",
    "program_from_dict",
    "topo_order",
    "ancestors_descendants",
    "ancestor_matrix",
    "compute_backbone",
]

DTYPE_BYTES = {
    "f64": 8,
    "f32": 4,
    "f16": 2,
    "bf16": 2,
    "i64": 8,
    "i32": 4,
    "i8": 1,
    "bool": 1,
}

KINDS = (
    "Parameter",
    "Input",
    "MatMul",
    "Add",
    "Mul",
    "UnaryElementwise",
    "Reshape",
    "Transpose",
    "ReduceSum",
    "Broadcast",
    "Concat",
)

_KIND_TO_TEXT = {
    "Parameter": "param",
    "Input": "input",
    "MatMul": "matmul",
    "Add": "add",
    "Mul": "mul",
    "UnaryElementwise": "unary",
    "Reshape": "reshape",
    "Transpose": "transpose",
    "ReduceSum": "reduce_sum",
    "Broadcast": "broadcast",
    "Concat": "concat",
}
_TEXT_TO_KIND = {v: k for k, v in _KIND_TO_TEXT.items()}
_TEXT_TO_KIND.update({"parameter": "Parameter", "reducesum": "ReduceSum"})
_TEXT_TO_KIND.update({k.lower(): k for k in KINDS})

SOURCE_KINDS = frozenset({"Parameter", "Input"})
ELEMENTWISE_KINDS = frozenset({"Add", "Mul", "UnaryElementwise"})


class IRError(ValueError):
    """Base class for malformed programs."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{line}:{col}: {message}"
        super().__init__(message)


class IRSyntaxError(IRError):
    pass


class CycleError(IRError):
    pass


class ShapeError(IRError):
    pass


class DanglingReferenceError(IRError):
    pass


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]
    dtype: str = "f32"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in dims):
            raise ShapeError(f"tensor extents must be >= 1, got {list(dims)}")
        if self.dtype not in DTYPE_BYTES:
            raise ShapeError(f"unknown dtype {self.dtype!r}")
        object.__setattr__(self, "dims", dims)

    @property
    def elem_bytes(self) -> int:
        return DTYPE_BYTES[self.dtype]

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def numel(self) -> int:
        return math.prod(self.dims)

    @property
    def nbytes(self) -> int:
        return self.numel * self.elem_bytes

    def with_dims(self, dims: Sequence[int]) -> "TensorShape":
        return TensorShape(tuple(dims), self.dtype)

    def __str__(self) -> str:
        return f"{self.dtype}[{','.join(map(str, self.dims))}]"


@dataclass(frozen=True)
class Operator:
    id: str
    kind: str
    inputs: tuple[str, ...]
    output_shape: TensorShape
    attrs: Mapping[str, Any] = field(default_factory=dict)
    flops: float = 0.0

    @property
    def shape(self) -> TensorShape:
        return self.output_shape

    @property
    def phase(self) -> str:
        """Training phase tag: ``fwd``, ``bwd`` or ``update``."""
        if "phase" in self.attrs:
            return str(self.attrs["phase"])
        return "update" if "alias" in self.attrs else "fwd"


# --------------------------------------------------------------------------
# shape rules


def _matmul_dims(a: TensorShape, b: TensorShape, attrs: Mapping[str, Any]):
    if a.rank < 2 or b.rank != a.rank:
        raise ShapeError(f"matmul needs equal ranks >= 2, got {a} and {b}")
    if a.dims[:-2] != b.dims[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a} vs {b}")
    m, ka = a.dims[-2:]
    if attrs.get("transpose_a"):
        m, ka = ka, m
    kb, n = b.dims[-2:]
    if attrs.get("transpose_b"):
        kb, n = n, kb
    if ka != kb:
        raise ShapeError(f"matmul contracted dims disagree: {a} x {b}")
    return a.dims[:-2], m, ka, n


def infer_shape(
    kind: str,
    in_shapes: Sequence[TensorShape],
    attrs: Mapping[str, Any],
    declared: TensorShape | None,
) -> TensorShape:
    """Check the per-kind shape rule and return the output shape."""

    def need(n):
        if len(in_shapes) != n:
            raise ShapeError(f"{kind} takes {n} input(s), got {len(in_shapes)}")

    def need_declared():
        if declared is None:
            raise ShapeError(f"{kind} needs an explicit output type")
        return declared

    if kind in SOURCE_KINDS:
        need(0)
        return need_declared()

    if kind == "MatMul":
        need(2)
        batch, m, _, n = _matmul_dims(in_shapes[0], in_shapes[1], attrs)
        out = in_shapes[0].with_dims(batch + (m, n))
    elif kind in ("Add", "Mul"):
        need(2)
        if in_shapes[0].dims != in_shapes[1].dims:
            raise ShapeError(f"{kind} operands differ: {in_shapes[0]} vs {in_shapes[1]}")
        out = in_shapes[0]
    elif kind == "UnaryElementwise":
        need(1)
        out = in_shapes[0]
        if declared is not None:
            # casts may change dtype
            out = TensorShape(out.dims, declared.dtype)
    elif kind == "Reshape":
        need(1)
        decl = need_declared()
        if decl.numel != in_shapes[0].numel:
            raise ShapeError(
                f"reshape changes element count: {in_shapes[0]} -> {decl}"
            )
        out = in_shapes[0].with_dims(decl.dims)
    elif kind == "Transpose":
        need(1)
        src = in_shapes[0]
        perm = tuple(attrs.get("perm", range(src.rank - 1, -1, -1)))
        if sorted(perm) != list(range(src.rank)):
            raise ShapeError(f"bad transpose perm {list(perm)} for {src}")
        out = src.with_dims(tuple(src.dims[p] for p in perm))
    elif kind == "ReduceSum":
        need(1)
        src = in_shapes[0]
        axes = _as_axes(attrs.get("axes", range(src.rank)), src.rank)
        out = src.with_dims(tuple(e for i, e in enumerate(src.dims) if i not in axes))
    elif kind == "Broadcast":
        need(1)
        decl = need_declared()
        src = in_shapes[0]
        mapping = broadcast_mapping(src.rank, decl.rank, attrs)
        for k, j in enumerate(mapping):
            if src.dims[k] != decl.dims[j]:
                raise ShapeError(f"broadcast {src} -> {decl} mismatches at dim {k}")
        out = src.with_dims(decl.dims)
    elif kind == "Concat":
        if not in_shapes:
            raise ShapeError("concat takes at least one input")
        first = in_shapes[0]
        axis = int(attrs.get("axis", 0))
        if not 0 <= axis < first.rank:
            raise ShapeError(f"concat axis {axis} out of range for {first}")
        total = 0
        for s in in_shapes:
            if s.rank != first.rank or any(
                s.dims[i] != first.dims[i] for i in range(first.rank) if i != axis
            ):
                raise ShapeError(f"concat operands disagree: {first} vs {s}")
            total += s.dims[axis]
        dims = list(first.dims)
        dims[axis] = total
        out = first.with_dims(dims)
    else:
        raise IRError(f"unknown operator kind {kind!r}")

    if declared is not None and declared.dims != out.dims:
        raise ShapeError(f"{kind} declared {declared} but rule gives {out}")
    return out


def _as_axes(axes, rank: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = [axes]
    out = tuple(sorted({a % rank if rank else a for a in axes}))
    if any(a < 0 or a >= rank for a in out):
        raise ShapeError(f"reduce axes {list(axes)} out of range for rank {rank}")
    return out


def reduce_axes(op: Operator, in_rank: int) -> tuple[int, ...]:
    return _as_axes(op.attrs.get("axes", range(in_rank)), in_rank)


def broadcast_mapping(in_rank: int, out_rank: int, attrs: Mapping[str, Any]) -> tuple[int, ...]:
    """Output dim for each input dim (trailing alignment unless ``dims`` given)."""
    if "dims" in attrs:
        mapping = tuple(int(x) for x in attrs["dims"])
    else:
        mapping = tuple(range(out_rank - in_rank, out_rank))
    if len(mapping) != in_rank or len(set(mapping)) != in_rank:
        raise ShapeError(f"broadcast dims {list(mapping)} invalid for rank {in_rank}")
    if any(j < 0 or j >= out_rank for j in mapping) or list(mapping) != sorted(mapping):
        raise ShapeError(f"broadcast dims {list(mapping)} must be increasing and in range")
    return mapping


def op_flops(kind: str, in_shapes: Sequence[TensorShape], out: TensorShape, attrs) -> float:
    if kind == "MatMul":
        batch, m, k, n = _matmul_dims(in_shapes[0], in_shapes[1], attrs)
        return 2.0 * math.prod(batch) * m * k * n
    if kind in ELEMENTWISE_KINDS:
        return float(out.numel)
    if kind == "ReduceSum":
        return float(in_shapes[0].numel)
    return 0.0


# --------------------------------------------------------------------------
# program


class TensorProgram:
    """Validated, immutable operator DAG.

    ``outputs`` defaults to the sinks.  Construction checks references,
    per-kind shape rules, acyclicity and backward reachability from the
    outputs, and fills in ``flops`` for every operator.
    """

    def __init__(self, operators: Iterable[Operator], outputs: Sequence[str] | None = None):
        ops: dict[str, Operator] = {}
        for op in operators:
            if op.id in ops:
                raise IRError(f"duplicate operator id {op.id!r}")
            if op.kind not in KINDS:
                raise IRError(f"unknown operator kind {op.kind!r} for {op.id!r}")
            ops[op.id] = op
        if not ops:
            raise IRError("empty program")
        for op in ops.values():
            for src in op.inputs:
                if src not in ops:
                    raise DanglingReferenceError(f"{op.id!r} references unknown operator {src!r}")
            if op.kind not in SOURCE_KINDS and not op.inputs:
                raise IRError(f"{op.kind} {op.id!r} has no inputs")

        consumers: dict[str, list[str]] = {k: [] for k in ops}
        for op in ops.values():
            for src in dict.fromkeys(op.inputs):
                consumers[src].append(op.id)
        self._consumers = {k: tuple(v) for k, v in consumers.items()}
        self._ops = ops
        self._topo = self._kahn()

        # shape inference in topological order
        for oid in self._topo:
            op = ops[oid]
            in_shapes = [ops[s].output_shape for s in op.inputs]
            try:
                shape = infer_shape(op.kind, in_shapes, op.attrs, op.output_shape)
            except ShapeError as exc:
                raise ShapeError(f"{oid}: {exc}") from None
            flops = op_flops(op.kind, in_shapes, shape, op.attrs)
            ops[oid] = replace(op, output_shape=shape, flops=flops)

        if outputs is None:
            outputs = [k for k in ops if not self._consumers[k]]
        outputs = tuple(dict.fromkeys(outputs))
        if not outputs:
            raise IRError("program has no outputs")
        for o in outputs:
            if o not in ops:
                raise DanglingReferenceError(f"unknown output {o!r}")
        self.outputs = outputs
        live = set(outputs)
        stack = list(outputs)
        while stack:
            for src in ops[stack.pop()].inputs:
                if src not in live:
                    live.add(src)
                    stack.append(src)
        dead = [k for k in ops if k not in live]
        if dead:
            raise IRError(f"operators not reachable from any output: {dead[:5]}")

    def _kahn(self) -> tuple[str, ...]:
        indeg = {k: len(set(op.inputs)) for k, op in self._ops.items()}
        heap = [k for k, v in indeg.items() if v == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            k = heapq.heappop(heap)
            order.append(k)
            for c in self._consumers[k]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, c)
        if len(order) != len(self._ops):
            stuck = sorted(k for k, v in indeg.items() if v > 0)
            raise CycleError(f"cycle detected among {stuck[:5]}")
        return tuple(order)

    # mapping-like access
    def __getitem__(self, key: str) -> Operator:
        return self._ops[key]

    def __contains__(self, key: object) -> bool:
        return key in self._ops

    def __iter__(self) -> Iterator[Operator]:
        return iter(self._ops.values())

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def operators(self) -> Mapping[str, Operator]:
        return self._ops

    @property
    def parameter_ids(self) -> tuple[str, ...]:
        return tuple(k for k, op in self._ops.items() if op.kind == "Parameter")

    def consumers(self, key: str) -> tuple[str, ...]:
        return self._consumers[key]

    def producers(self, key: str) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self._ops[key].inputs))

    def edges(self) -> list[tuple[str, str]]:
        """Distinct (producer, consumer) pairs in topological order."""
        return [(src, k) for k in self._topo for src in self.producers(k)]

    @property
    def topo(self) -> tuple[str, ...]:
        return self._topo

    def aliases(self) -> dict[str, str]:
        """Update op -> parameter it overwrites (the ``alias`` attribute)."""
        out = {}
        for op in self._ops.values():
            target = op.attrs.get("alias")
            if target is not None:
                if target not in self._ops:
                    raise DanglingReferenceError(f"{op.id!r} aliases unknown {target!r}")
                out[op.id] = str(target)
        return out

    def __repr__(self) -> str:
        return f"TensorProgram({len(self)} ops, {len(self.parameter_ids)} params)"


# --------------------------------------------------------------------------
# analyses


def topo_order(g: TensorProgram) -> list[str]:
    """Topological order with ties broken by ascending id."""
    return list(g.topo)


def ancestors_descendants(g: TensorProgram, i: str) -> tuple[set[str], set[str]]:
    if i not in g:
        raise KeyError(f"unknown operator {i!r}")

    def walk(start, step):
        seen: set[str] = set()
        queue = deque(step(start))
        while queue:
            k = queue.popleft()
            if k not in seen:
                seen.add(k)
                queue.extend(step(k))
        return seen

    return walk(i, g.producers), walk(i, g.consumers)


def ancestor_matrix(g: TensorProgram, order: Sequence[str] | None = None) -> np.ndarray:
    """Boolean matrix whose row ``b`` marks the ancestors of op ``order[b]``.

    Ops outside ``order`` are ignored, so passing a subset gives reachability
    inside the induced subgraph.
    """
    order = list(order or g.topo)
    index = {k: n for n, k in enumerate(order)}
    n = len(order)
    anc = np.zeros((n, n), dtype=bool)
    for b, k in enumerate(order):
        row = anc[b]
        for src in g.producers(k):
            a = index.get(src)
            if a is not None:
                row |= anc[a]
                row[a] = True
    return anc


@dataclass(frozen=True)
class BackboneAnalysis:
    earliest: Mapping[str, int]
    latest: Mapping[str, int]
    backbone: frozenset[str]
    critical_nodes: frozenset[str]

    def critical_order(self) -> list[str]:
        return sorted(self.critical_nodes, key=lambda k: (self.earliest[k], k))


def compute_backbone(g: TensorProgram, flops_threshold: float = 0.0) -> BackboneAnalysis:
    """Unit-time earliest/latest levels, backbone and critical nodes.

    Every sink is anchored at the deepest earliest level; nodes whose two
    levels coincide form the backbone, and backbone MatMuls with at least
    ``flops_threshold`` flops are critical.
    """
    earliest: dict[str, int] = {}
    for k in g.topo:
        earliest[k] = 1 + max((earliest[s] for s in g.producers(k)), default=-1)
    horizon = max(earliest.values())
    latest: dict[str, int] = {}
    for k in reversed(g.topo):
        cons = g.consumers(k)
        latest[k] = min(latest[c] for c in cons) - 1 if cons else horizon
    backbone = frozenset(k for k in g.topo if earliest[k] == latest[k])
    critical = frozenset(
        k for k in backbone if g[k].kind == "MatMul" and g[k].flops >= flops_threshold
    )
    return BackboneAnalysis(earliest, latest, backbone, critical)


# --------------------------------------------------------------------------
# text format

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<punct>[=(),:\[\]{};^])
    """,
    re.VERBOSE,
)
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*\Z")


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise IRSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            toks.append(_Tok("sep", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind == "punct" and m.group() == ";":
            toks.append(_Tok("sep", ";", line, col))
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        shown = tok.text if tok.kind != "eof" else "end of input"
        return IRSyntaxError(f"{msg} (found {shown!r})", tok.line, tok.col)

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text or tok.kind == "string":
            raise self.error(f"expected {text!r}", tok)
        return tok

    def accept(self, text: str) -> bool:
        tok = self.peek()
        if tok.text == text and tok.kind in ("punct", "ident"):
            self.pos += 1
            return True
        return False

    def ident(self) -> str:
        tok = self.next()
        if tok.kind != "ident":
            raise self.error("expected identifier", tok)
        return tok.text

    def parse(self):
        stmts, outputs = [], None
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                break
            if tok.kind == "sep":
                self.pos += 1
                continue
            if tok.kind == "ident" and tok.text == "output" and self.toks[self.pos + 1].text != "=":
                self.pos += 1
                outputs = outputs or []
                outputs.append(self.ident())
                while self.accept(","):
                    outputs.append(self.ident())
            else:
                stmts.append(self.statement())
            tok = self.peek()
            if tok.kind not in ("sep", "eof"):
                raise self.error("expected end of statement")
        return stmts, outputs

    def statement(self):
        start = self.peek()
        oid = self.ident()
        self.expect("=")
        ktok = self.peek()
        kname = self.ident()
        kind = _TEXT_TO_KIND.get(kname) or _TEXT_TO_KIND.get(kname.lower())
        if kind is None:
            raise self.error(f"unknown operator kind {kname!r}", ktok)
        args: list[str] = []
        attrs: dict[str, Any] = {}
        if self.accept("("):
            if not self.accept(")"):
                while True:
                    args.append(self.ident())
                    if self.accept("^"):
                        t = self.next()
                        if t.text != "T":
                            raise self.error("only ^T is supported", t)
                        slot = len(args) - 1
                        if kind != "MatMul" or slot > 1:
                            raise self.error("^T only applies to matmul operands", t)
                        attrs["transpose_a" if slot == 0 else "transpose_b"] = True
                    if self.accept(")"):
                        break
                    self.expect(",")
        self.accept(":")
        declared = None
        tok = self.peek()
        if tok.kind == "ident" and tok.text in DTYPE_BYTES:
            self.pos += 1
            self.expect("[")
            dims: list[int] = []
            if not self.accept("]"):
                while True:
                    dims.append(self.integer())
                    if self.accept("]"):
                        break
                    self.expect(",")
            try:
                declared = TensorShape(tuple(dims), tok.text)
            except ShapeError as exc:
                raise IRSyntaxError(str(exc), tok.line, tok.col) from None
        if self.accept("{"):
            if not self.accept("}"):
                while True:
                    key = self.ident()
                    attrs[key] = self.value() if self.accept("=") else True
                    if self.accept("}"):
                        break
                    self.expect(",")
        return oid, kind, args, declared, attrs, start

    def integer(self) -> int:
        tok = self.next()
        if tok.kind != "number" or not re.fullmatch(r"-?\d+", tok.text):
            raise self.error("expected integer", tok)
        return int(tok.text)

    def value(self):
        tok = self.next()
        if tok.kind == "number":
            return int(tok.text) if re.fullmatch(r"-?\d+", tok.text) else float(tok.text)
        if tok.kind == "string":
            return json.loads(tok.text)
        if tok.kind == "ident":
            return {"true": True, "false": False}.get(tok.text, tok.text)
        if tok.text == "[":
            items = []
            if not self.accept("]"):
                while True:
                    items.append(self.value())
                    if self.accept("]"):
                        break
                    self.expect(",")
            return items
        raise self.error("expected attribute value", tok)


def parse_text(text: str) -> TensorProgram:
    stmts, outputs = _Parser(text).parse()
    ops = []
    seen: dict[str, _Tok] = {}
    for oid, kind, args, declared, attrs, tok in stmts:
        if oid in seen:
            raise IRError(f"duplicate operator id {oid!r}", tok.line, tok.col)
        seen[oid] = tok
        if declared is None:
            # placeholder; shape inference replaces it, source kinds must declare
            if kind in SOURCE_KINDS or kind in ("Reshape", "Broadcast"):
                raise IRSyntaxError(f"{kind} {oid!r} needs an output type", tok.line, tok.col)
        ops.append(Operator(oid, kind, tuple(args), declared, attrs))  # type: ignore[arg-type]
    for op in ops:
        for src in op.inputs:
            if src not in seen:
                tok = seen[op.id]
                raise DanglingReferenceError(
                    f"{op.id!r} references unknown operator {src!r}", tok.line, tok.col
                )
    return TensorProgram(ops, outputs)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_fmt_value(x) for x in v) + "]"
    s = str(v)
    if _IDENT_RE.match(s) and s not in ("true", "false"):
        return s
    return json.dumps(s)


def to_text(g: TensorProgram) -> str:
    lines = []
    for k in g.operators:
        op = g[k]
        args = ", ".join(op.inputs)
        line = f"{op.id} = {_KIND_TO_TEXT[op.kind]}({args}) : {op.output_shape}"
        if op.attrs:
            body = ", ".join(
                k2 if v is True else f"{k2}={_fmt_value(v)}" for k2, v in sorted(op.attrs.items())
            )
            line += " {" + body + "}"
        lines.append(line)
    lines.append("output " + ", ".join(g.outputs))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# JSON format


def program_to_dict(g: TensorProgram) -> dict:
    return {
        "format": "parashard-ir",
        "version": 1,
        "operators": [
            {
                "id": op.id,
                "kind": op.kind,
                "inputs": list(op.inputs),
                "output_shape": {"dims": list(op.output_shape.dims), "dtype": op.output_shape.dtype},
                "attrs": dict(op.attrs),
            }
            for op in g
        ],
        "outputs": list(g.outputs),
    }


def program_from_dict(data: Mapping[str, Any]) -> TensorProgram:
    try:
        ops = []
        for entry in data["operators"]:
            shape = entry.get("output_shape")
            declared = None
            if shape is not None:
                declared = TensorShape(tuple(shape["dims"]), shape.get("dtype", "f32"))
            attrs = dict(entry.get("attrs", {}))
            if "pin" in entry:
                attrs["pin"] = entry["pin"]
            ops.append(
                Operator(entry["id"], entry["kind"], tuple(entry.get("inputs", ())), declared, attrs)  # type: ignore[arg-type]
            )
    except (KeyError, TypeError) as exc:
        raise IRSyntaxError(f"malformed program JSON: {exc}") from None
    for op in ops:
        if op.output_shape is None and (op.kind in SOURCE_KINDS or op.kind in ("Reshape", "Broadcast")):
            raise IRSyntaxError(f"{op.kind} {op.id!r} needs output_shape")
    return TensorProgram(ops, data.get("outputs"))


def to_json(g: TensorProgram) -> str:
    return json.dumps(program_to_dict(g), indent=1, sort_keys=True) + "\n"


def parse_json(text: str) -> TensorProgram:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IRSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return program_from_dict(data)


def parse_program(text: str, format: str = "text") -> TensorProgram:
    """Parse IR source in ``text`` or ``json`` format."""
    if format == "json":
        return parse_json(text)
    if format != "text":
        raise ValueError(f"unknown IR format {format!r}")
    return parse_text(text)
