"""Sharding-spec algebra on one mesh axis.

A tensor on a mesh axis of size ``d`` is either ``Replicated``, ``Partial``
(every device holds a full-shape summand) or ``Shard(dim, stride)``: along
``dim`` the tensor is cut into runs of ``stride`` consecutive units and run
``r`` lives on device ``r % d``.  ``stride == extent / d`` is the usual
contiguous block split.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .ir import (
    SOURCE_KINDS,
    Operator,
    TensorProgram,
    TensorShape,
    broadcast_mapping,
    reduce_axes,
)

__all__ = [
    "Shard",
    "Replicated",
    "Partial",
    "REPLICATED",
    "PARTIAL",
    "ShardingSpec",
    "parse_spec",
    "DeviceMesh",
    "ReshardCost",
    "Strategy",
    "OpView",
    "ProgramView",
    "Link",
    "divisors",
    "enumerate_specs",
    "spec_valid",
    "local_shape",
    "element_device_map",
    "reshard_cost",
    "reshape_stride_passthrough",
    "op_strategies",
    "generate_candidates",
]


@dataclass(frozen=True, order=True)
class Shard:
    dim: int
    stride: int

    def __str__(self) -> str:
        return f"S({self.dim},{self.stride})"


@dataclass(frozen=True)
class Replicated:
    def __str__(self) -> str:
        return "R"


@dataclass(frozen=True)
class Partial:
    def __str__(self) -> str:
        return "P"


REPLICATED = Replicated()
PARTIAL = Partial()
ShardingSpec = Union[Shard, Replicated, Partial]

_SPEC_RE = re.compile(r"\s*S\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*\Z")


def parse_spec(text: str, shape: TensorShape | None = None, d: int | None = None) -> ShardingSpec:
    """Parse ``R``, ``P``, ``S(dim)`` or ``S(dim,stride)``.

    ``S(dim)`` means maximum stride and needs ``shape`` and ``d``.
    """
    t = text.strip()
    if t == "R":
        return REPLICATED
    if t == "P":
        return PARTIAL
    m = _SPEC_RE.match(t)
    if not m:
        raise ValueError(f"bad sharding spec {text!r}")
    dim = int(m.group(1))
    if m.group(2) is not None:
        return Shard(dim, int(m.group(2)))
    if shape is None or d is None:
        raise ValueError(f"{text!r} needs a shape and axis size to resolve its stride")
    return Shard(dim, shape.dims[dim] // d)


@dataclass(frozen=True)
class DeviceMesh:
    """Logical device mesh; per-axis link parameters in bytes/s and seconds."""

    dims: tuple[int, ...]
    bandwidth: tuple[float, ...]
    alpha: tuple[float, ...]
    device_flops: float = 1e12
    axis_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        object.__setattr__(self, "bandwidth", tuple(float(x) for x in self.bandwidth))
        object.__setattr__(self, "alpha", tuple(float(x) for x in self.alpha))
        if not self.dims or any(x < 1 for x in self.dims):
            raise ValueError(f"mesh dims must be positive, got {self.dims}")
        if len(self.bandwidth) != len(self.dims) or len(self.alpha) != len(self.dims):
            raise ValueError("one bandwidth and alpha per mesh axis")
        if any(b <= 0 for b in self.bandwidth) or any(a < 0 for a in self.alpha):
            raise ValueError("bandwidths must be > 0 and latencies >= 0")
        if self.device_flops <= 0:
            raise ValueError("device_flops must be > 0")

    @classmethod
    def uniform(cls, dims: Sequence[int], bandwidth=1e11, alpha=1e-5, device_flops=1e12):
        n = len(dims)
        return cls(tuple(dims), (bandwidth,) * n, (alpha,) * n, device_flops)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def describe(self) -> str:
        return "x".join(map(str, self.dims))


@dataclass(frozen=True)
class ReshardCost:
    collective: str
    bytes: float
    seconds: float


NO_COMM = ReshardCost("None", 0.0, 0.0)


def divisors(n: int) -> list[int]:
    small = [k for k in range(1, math.isqrt(n) + 1) if n % k == 0]
    return sorted(set(small + [n // k for k in small]))


def _strides(extent: int, d: int, all_strides: bool) -> list[int]:
    if extent % d:
        return []
    return divisors(extent // d) if all_strides else [extent // d]


def enumerate_specs(shape: TensorShape, d: int) -> list[ShardingSpec]:
    """Every spec of ``shape`` on an axis of ``d`` devices.

    Shard specs come first (by dim, then ascending stride), followed by
    Replicated and Partial.  A trivial axis only admits Replicated.
    """
    if d < 1:
        raise ValueError("axis size must be >= 1")
    if d == 1:
        return [REPLICATED]
    specs: list[ShardingSpec] = [
        Shard(dim, s) for dim, e in enumerate(shape.dims) for s in _strides(e, d, True)
    ]
    return specs + [REPLICATED, PARTIAL]


def spec_valid(spec: ShardingSpec, shape: TensorShape, d: int) -> bool:
    if isinstance(spec, Shard):
        return (
            0 <= spec.dim < shape.rank
            and spec.stride >= 1
            and shape.dims[spec.dim] % (d * spec.stride) == 0
        )
    return True


def local_shape(shape: TensorShape, spec: ShardingSpec, d: int) -> TensorShape:
    if isinstance(spec, Shard):
        dims = list(shape.dims)
        dims[spec.dim] //= d
        return shape.with_dims(dims)
    return shape


def element_device_map(shape: TensorShape, spec: ShardingSpec, d: int) -> np.ndarray:
    """Owning device of every element in row-major order (-1 = all devices)."""
    if not isinstance(spec, Shard):
        return np.full(shape.numel, -1, dtype=np.int64)
    idx = np.indices(shape.dims).reshape(shape.rank, -1)[spec.dim]
    return (idx // spec.stride) % d


def reshard_cost(
    src: ShardingSpec,
    dst: ShardingSpec,
    shape: TensorShape,
    mesh: DeviceMesh,
    axis: int,
) -> ReshardCost:
    """Alpha-beta price of converting ``src`` into ``dst`` on one mesh axis.

    Wire bytes follow ring collectives over the full tensor size ``S``.
    Moving to a finer placement (slicing a replicated tensor, zero-filling a
    shard into a partial sum) is local and free.
    """
    d = mesh.dims[axis]
    for spec in (src, dst):
        if not spec_valid(spec, shape, d):
            raise ValueError(f"spec {spec} invalid for {shape} on axis of size {d}")
    if d == 1 or src == dst:
        return NO_COMM
    size = float(shape.nbytes)
    if isinstance(src, Partial):
        if isinstance(dst, Replicated):
            coll, wire = "AllReduce", 2 * (d - 1) / d * size
        else:
            coll, wire = "ReduceScatter", (d - 1) / d * size
    elif isinstance(src, Shard):
        if isinstance(dst, Replicated):
            coll, wire = "AllGather", (d - 1) / d * size
        elif isinstance(dst, Shard):
            coll, wire = "AllToAll", size / d * (d - 1) / d
        else:
            return NO_COMM
    else:
        return NO_COMM
    return ReshardCost(coll, wire, mesh.alpha[axis] + wire / mesh.bandwidth[axis])


def _passthrough(
    in_shape: TensorShape, out_shape: TensorShape, spec: ShardingSpec, d: int
) -> ShardingSpec | None:
    if not isinstance(spec, Shard):
        return spec
    if not spec_valid(spec, in_shape, d):
        raise ValueError(f"spec {spec} invalid for {in_shape} on axis of size {d}")
    # a Shard places flat element f on device (f // run) % d
    run = math.prod(in_shape.dims[spec.dim + 1 :]) * spec.stride
    for j, extent in enumerate(out_shape.dims):
        inner = math.prod(out_shape.dims[j + 1 :])
        if run % inner:
            continue
        stride = run // inner
        if extent % (d * stride) == 0:
            return Shard(j, stride)
    return None


def reshape_stride_passthrough(
    op: "Operator | OpView", in_spec: ShardingSpec, d: int, in_shape: TensorShape | None = None
) -> ShardingSpec | None:
    """Re-express ``in_spec`` on the reshape output without moving data.

    Returns ``None`` when no single (dim, stride) reproduces the input's
    element-to-device map; the caller must then reshard.
    """
    if op.kind != "Reshape":
        raise ValueError(f"{op.id} is a {op.kind}, not a Reshape")
    if in_shape is None:
        if not isinstance(op, OpView):
            raise ValueError("in_shape is required for a bare Operator")
        in_shape = op.in_shapes[0]
    return _passthrough(in_shape, op.output_shape, in_spec, d)


# --------------------------------------------------------------------------
# per-operator strategies


@dataclass(frozen=True)
class Strategy:
    """One sharding method of an operator on one mesh axis.

    ``ins`` are the specs the operator requires of its inputs (slot order);
    ``divisor`` splits the operator's flops across the axis.
    """

    out: ShardingSpec
    ins: tuple[ShardingSpec, ...]
    divisor: int = field(default=1, compare=False)

    def __str__(self) -> str:
        return f"{self.out}<-[{','.join(map(str, self.ins))}]"

    def to_json(self) -> dict:
        return {"out": str(self.out), "ins": [str(s) for s in self.ins]}

    @classmethod
    def from_json(cls, data: Mapping, divisor: int = 1) -> "Strategy":
        return cls(parse_spec(data["out"]), tuple(parse_spec(s) for s in data["ins"]), divisor)


@dataclass(frozen=True)
class OpView:
    """An operator as the sharding rules see it on one mesh axis."""

    id: str
    kind: str
    inputs: tuple[str, ...]
    in_shapes: tuple[TensorShape, ...]
    output_shape: TensorShape
    attrs: Mapping
    flops: float


@dataclass(frozen=True)
class Link:
    """Tensor flowing from ``src`` to input ``slot`` of ``dst``.

    ``slot == -1`` marks an aliasing link: the updated value of parameter
    ``dst`` must end up in the parameter's own spec for the next step.
    """

    src: str
    dst: str
    slot: int
    shape: TensorShape


class ProgramView:
    """Per-axis view of a program: operator views, links and outputs.

    ``from_program`` gives global shapes; ``localize`` derives the view seen
    by the next mesh axis once a strategy per op is fixed on this one.
    """

    def __init__(self, ops: Mapping[str, OpView], topo: Sequence[str], outputs: Iterable[str],
                 aliases: Mapping[str, str] | None = None, program: TensorProgram | None = None):
        self.program = program
        self.ops = dict(ops)
        self.topo = tuple(topo)
        self.outputs = frozenset(outputs)
        self.aliases = dict(aliases or {})
        cons: dict[str, list[str]] = {k: [] for k in self.ops}
        for k in self.topo:
            for src in dict.fromkeys(self.ops[k].inputs):
                cons[src].append(k)
        self.consumers = {k: tuple(v) for k, v in cons.items()}
        links = []
        for k in self.topo:
            v = self.ops[k]
            for slot, src in enumerate(v.inputs):
                links.append(Link(src, k, slot, v.in_shapes[slot]))
        for upd, param in sorted(self.aliases.items()):
            links.append(Link(upd, param, -1, self.ops[param].output_shape))
        self.links = tuple(links)

    @classmethod
    def from_program(cls, g: TensorProgram) -> "ProgramView":
        ops = {}
        for k in g.topo:
            op = g[k]
            ops[k] = OpView(
                op.id,
                op.kind,
                op.inputs,
                tuple(g[s].output_shape for s in op.inputs),
                op.output_shape,
                op.attrs,
                op.flops,
            )
        return cls(ops, g.topo, g.outputs, g.aliases(), g)

    def localize(self, choice: Mapping[str, Strategy], d: int) -> "ProgramView":
        ops = {}
        for k, v in self.ops.items():
            s = choice[k]
            ops[k] = OpView(
                v.id,
                v.kind,
                v.inputs,
                tuple(local_shape(sh, sp, d) for sh, sp in zip(v.in_shapes, s.ins)),
                local_shape(v.output_shape, s.out, d),
                v.attrs,
                v.flops / s.divisor,
            )
        return ProgramView(ops, self.topo, self.outputs, self.aliases, self.program)

    def __len__(self) -> int:
        return len(self.ops)


def _matmul_axes(v: OpView):
    r = v.in_shapes[0].rank
    ta, tb = bool(v.attrs.get("transpose_a")), bool(v.attrs.get("transpose_b"))
    a_m, a_k = (r - 1, r - 2) if ta else (r - 2, r - 1)
    b_k, b_n = (r - 1, r - 2) if tb else (r - 2, r - 1)
    return r, a_m, a_k, b_k, b_n


def op_strategies(v: OpView, d: int, all_strides: bool = False, is_output: bool = False) -> list[Strategy]:
    """Sharding methods of one operator on an axis of ``d`` devices.

    With ``all_strides`` every legal stride is produced; otherwise only the
    maximum stride, except where a reshape needs another stride to keep
    its layout.  The all-replicated method is always last.
    """
    n_in = len(v.inputs)
    rep = Strategy(REPLICATED, (REPLICATED,) * n_in, 1)
    if d == 1:
        return [rep]

    def st(e):
        return _strides(e, d, all_strides)

    out: list[Strategy] = []
    kind = v.kind
    if kind in SOURCE_KINDS:
        for dim, e in enumerate(v.output_shape.dims):
            out += [Strategy(Shard(dim, s), (), d) for s in st(e)]
    elif kind == "MatMul":
        a, b = v.in_shapes
        r, a_m, a_k, b_k, b_n = _matmul_axes(v)
        for bd in range(r - 2):
            for s in st(a.dims[bd]):
                out.append(Strategy(Shard(bd, s), (Shard(bd, s), Shard(bd, s)), d))
        for s in st(a.dims[a_m]):
            out.append(Strategy(Shard(r - 2, s), (Shard(a_m, s), REPLICATED), d))
        for s in st(b.dims[b_n]):
            out.append(Strategy(Shard(r - 1, s), (REPLICATED, Shard(b_n, s)), d))
        for s in st(a.dims[a_k]):
            out.append(Strategy(PARTIAL, (Shard(a_k, s), Shard(b_k, s)), d))
    elif kind in ("Add", "Mul", "UnaryElementwise"):
        for dim, e in enumerate(v.output_shape.dims):
            for s in st(e):
                sh = Shard(dim, s)
                out.append(Strategy(sh, (sh,) * n_in, d))
        if kind == "Add":
            out.append(Strategy(PARTIAL, (PARTIAL, PARTIAL), 1))
    elif kind == "Transpose":
        src = v.in_shapes[0]
        perm = list(v.attrs.get("perm", range(src.rank - 1, -1, -1)))
        for k, e in enumerate(src.dims):
            out += [Strategy(Shard(perm.index(k), s), (Shard(k, s),), d) for s in st(e)]
    elif kind == "ReduceSum":
        src = v.in_shapes[0]
        axes = reduce_axes(v, src.rank)  # type: ignore[arg-type]
        kept = [k for k in range(src.rank) if k not in axes]
        for k, e in enumerate(src.dims):
            for s in st(e):
                o = PARTIAL if k in axes else Shard(kept.index(k), s)
                out.append(Strategy(o, (Shard(k, s),), d))
    elif kind == "Broadcast":
        src = v.in_shapes[0]
        mapping = broadcast_mapping(src.rank, v.output_shape.rank, v.attrs)
        for k, e in enumerate(src.dims):
            out += [Strategy(Shard(mapping[k], s), (Shard(k, s),), d) for s in st(e)]
        for j, e in enumerate(v.output_shape.dims):
            if j not in mapping:
                out += [Strategy(Shard(j, s), (REPLICATED,), d) for s in st(e)]
    elif kind == "Reshape":
        src, dst = v.in_shapes[0], v.output_shape
        for k, e in enumerate(src.dims):
            for s in st(e):
                o = _passthrough(src, dst, Shard(k, s), d)
                if o is not None:
                    out.append(Strategy(o, (Shard(k, s),), d))
        for j, e in enumerate(dst.dims):
            for s in st(e):
                i = _passthrough(dst, src, Shard(j, s), d)
                if i is not None:
                    out.append(Strategy(Shard(j, s), (i,), d))
    elif kind == "Concat":
        axis = int(v.attrs.get("axis", 0))
        for dim, e in enumerate(v.output_shape.dims):
            if dim != axis:
                for s in st(e):
                    sh = Shard(dim, s)
                    out.append(Strategy(sh, (sh,) * n_in, d))
    else:
        raise ValueError(f"no sharding rule for {kind}")
    out.append(rep)
    if is_output:
        out = [s for s in out if not isinstance(s.out, Partial)]
    return list(dict.fromkeys(out))


def _pin_spec(v: OpView, pin_index: int, d: int) -> ShardingSpec | None:
    pin = v.attrs.get("pin")
    if pin is None:
        return None
    if isinstance(pin, str):
        pin = [pin]
    if pin_index >= len(pin) or pin[pin_index] in (None, "", "*"):
        return None
    return parse_spec(str(pin[pin_index]), v.output_shape, d)


def generate_candidates(
    g: "TensorProgram | ProgramView",
    mesh: DeviceMesh,
    axis: int = 0,
    pin_index: int | None = None,
) -> dict[str, list[Strategy]]:
    """Per-op candidate strategies on ``mesh.dims[axis]``.

    Every op gets its maximum-stride methods and the replicated one.  Then,
    starting from every method of every MatMul, neighbours are merged
    whenever a method of theirs consumes or produces the shared tensor in
    exactly the same non-replicated spec; every method met on the way becomes a candidate
    too, which is how non-maximum strides enter through reshapes.
    Operators pinned through the ``pin`` attribute keep only methods with the
    pinned output spec.
    """
    view = g if isinstance(g, ProgramView) else ProgramView.from_program(g)
    d = mesh.dims[axis]
    pin_index = axis if pin_index is None else pin_index

    full_cache: dict[str, list[Strategy]] = {}

    def full(k: str) -> list[Strategy]:
        if k not in full_cache:
            full_cache[k] = op_strategies(view.ops[k], d, True, k in view.outputs)
        return full_cache[k]

    by_out: dict[str, dict] = {}
    by_in: dict[tuple[str, str], dict] = {}

    def with_out(k: str, spec) -> list[Strategy]:
        if k not in by_out:
            table = defaultdict(list)
            for s in full(k):
                table[s.out].append(s)
            by_out[k] = table
        return by_out[k].get(spec, [])

    def with_in(k: str, src: str, spec) -> list[Strategy]:
        key = (k, src)
        if key not in by_in:
            slots = [i for i, x in enumerate(view.ops[k].inputs) if x == src]
            table = defaultdict(list)
            for s in full(k):
                first = s.ins[slots[0]]
                if all(s.ins[i] == first for i in slots):
                    table[first].append(s)
            by_in[key] = table
        return by_in[key].get(spec, [])

    cands: dict[str, dict[Strategy, None]] = {}
    for k in view.topo:
        base = op_strategies(view.ops[k], d, False, k in view.outputs)
        cands[k] = dict.fromkeys(base)

    if d > 1:
        seen: set[tuple[str, Strategy]] = set()
        stack = [
            (k, s) for k in reversed(view.topo) if view.ops[k].kind == "MatMul" for s in reversed(list(cands[k]))
        ]
        while stack:
            k, s = stack.pop()
            if (k, s) in seen:
                continue
            seen.add((k, s))
            cands[k][s] = None
            # a replicated tensor can feed any method, so it does not merge
            if s.out != REPLICATED:
                for c in view.consumers[k]:
                    for t in with_in(c, k, s.out):
                        if (c, t) not in seen:
                            stack.append((c, t))
            for slot, p in enumerate(view.ops[k].inputs):
                if s.ins[slot] == REPLICATED:
                    continue
                for u in with_out(p, s.ins[slot]):
                    if (p, u) not in seen:
                        stack.append((p, u))

    result = {}
    for k in view.topo:
        lst = list(cands[k])
        pinned = _pin_spec(view.ops[k], pin_index, d)
        if pinned is not None:
            lst = [s for s in full(k) if s.out == pinned]
            if not lst:
                raise ValueError(f"pin {pinned} of {k!r} matches no sharding method")
        result[k] = lst
    return result
