"""Deterministic model-like programs and exhaustive reference solvers.

Families:

* ``mlp``: residual MLP (``x + relu(x @ W)`` per layer).
* ``gpt_like``: pre-norm transformer blocks written at a low level (norms,
  softmax and GELU decomposed into elementwise ops), optionally with the
  backward pass and Adam-style updates.
* ``moe_like``: per-expert gating and FFN branches summed back together.
* ``skipnet``: a layer stack with skip edges from layer ``i`` to ``i + 2``.

Training variants come from a small reverse-mode builder; every generated
backward op carries ``phase="bwd"`` and ``origin`` (the forward op it
differentiates), every optimizer op carries ``phase="update"``, and ops
that overwrite a parameter or optimizer state carry ``alias``.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ir import Operator, TensorProgram, TensorShape, infer_shape

__all__ = [
    "FixtureSpec",
    "GraphBuilder",
    "generate",
    "mlp",
    "gpt_like",
    "moe_like",
    "skipnet",
    "chain",
    "random_dag",
    "random_spmd_program",
    "brute_force_spmd",
    "brute_force_stages",
    "FAMILIES",
]

FAMILIES = ("mlp", "gpt_like", "moe_like", "skipnet")


class GraphBuilder:
    """Appends operators with inferred shapes; can emit a backward pass."""

    def __init__(self, dtype: str = "f32"):
        self.dtype = dtype
        self.ops: dict[str, Operator] = {}
        self.order: list[str] = []
        self.phase = "fwd"
        self.origin: str | None = None
        self.scope = ""
        self._counts: dict[str, int] = {}
        self.trainable: set[str] = set()
        self._needs_grad: set[str] = set()

    # naming ------------------------------------------------------------
    def _name(self, base: str) -> str:
        stem = f"{self.scope}{base}"
        n = self._counts.get(stem, 0)
        self._counts[stem] = n + 1
        return stem if n == 0 else f"{stem}.{n}"

    def shape(self, k: str) -> TensorShape:
        return self.ops[k].output_shape

    def add_op(self, kind: str, inputs: Sequence[str], name: str, out: Sequence[int] | None = None,
               attrs: Mapping | None = None, dtype: str | None = None) -> str:
        attrs = dict(attrs or {})
        if self.phase != "fwd":
            attrs.setdefault("phase", self.phase)
            if self.origin is not None and self.phase == "bwd":
                attrs.setdefault("origin", self.origin)
        declared = None if out is None else TensorShape(tuple(out), dtype or self.dtype)
        shape = infer_shape(kind, [self.shape(i) for i in inputs], attrs, declared)
        k = self._name(name)
        self.ops[k] = Operator(k, kind, tuple(inputs), shape, attrs)
        self.order.append(k)
        if self.phase == "fwd" and any(i in self._needs_grad for i in inputs):
            self._needs_grad.add(k)
        return k

    # forward vocabulary --------------------------------------------------
    def param(self, name: str, dims: Sequence[int]) -> str:
        k = self.add_op("Parameter", (), name, dims)
        self.trainable.add(k)
        self._needs_grad.add(k)
        return k

    def input(self, name: str, dims: Sequence[int]) -> str:
        return self.add_op("Input", (), name, dims)

    def matmul(self, a: str, b: str, name: str = "matmul", ta: bool = False, tb: bool = False) -> str:
        attrs = {}
        if ta:
            attrs["transpose_a"] = True
        if tb:
            attrs["transpose_b"] = True
        return self.add_op("MatMul", (a, b), name, attrs=attrs)

    def add(self, a: str, b: str, name: str = "add") -> str:
        return self.add_op("Add", (a, b), name)

    def mul(self, a: str, b: str, name: str = "mul") -> str:
        return self.add_op("Mul", (a, b), name)

    def unary(self, a: str, fn: str, name: str | None = None) -> str:
        return self.add_op("UnaryElementwise", (a,), name or fn, attrs={"fn": fn})

    def cast(self, a: str, dtype: str, name: str = "cast") -> str:
        return self.add_op("UnaryElementwise", (a,), name, self.shape(a).dims, {"fn": "cast"}, dtype)

    def reshape(self, a: str, dims: Sequence[int], name: str = "reshape") -> str:
        return self.add_op("Reshape", (a,), name, dims)

    def transpose(self, a: str, perm: Sequence[int], name: str = "transpose") -> str:
        return self.add_op("Transpose", (a,), name, attrs={"perm": list(perm)})

    def reduce_sum(self, a: str, axes: Sequence[int], name: str = "reduce_sum") -> str:
        return self.add_op("ReduceSum", (a,), name, attrs={"axes": list(axes)})

    def broadcast(self, a: str, dims_out: Sequence[int], mapping: Sequence[int], name: str = "broadcast") -> str:
        return self.add_op("Broadcast", (a,), name, dims_out, attrs={"dims": list(mapping)})

    # composite blocks ----------------------------------------------------
    def layer_norm(self, x: str, hidden: int, name: str) -> str:
        t, h = self.shape(x).dims
        saved, self.scope = self.scope, f"{self.scope}{name}."
        gamma = self.param("gamma", [hidden])
        beta = self.param("beta", [hidden])
        out_dtype = self.shape(x).dtype
        x = self.cast(x, "f32", "in_f32")
        s = self.reduce_sum(x, [1], "sum")
        mean = self.unary(s, "scale_inv_h", "mean")
        xc = self.add(x, self.unary(self.broadcast(mean, [t, h], [0], "mean_b"), "neg"), "center")
        sq = self.mul(xc, xc, "square")
        var = self.unary(self.reduce_sum(sq, [1], "sq_sum"), "scale_inv_h", "var")
        rstd = self.unary(self.unary(var, "add_eps"), "rsqrt")
        xn = self.mul(xc, self.broadcast(rstd, [t, h], [0], "rstd_b"), "normed")
        y = self.mul(xn, self.broadcast(gamma, [t, h], [1], "gamma_b"), "scaled")
        y = self.add(y, self.broadcast(beta, [t, h], [1], "beta_b"), "shifted")
        y = self.cast(y, out_dtype, "out")
        self.scope = saved
        return y

    def gelu(self, x: str, name: str = "gelu") -> str:
        saved, self.scope = self.scope, f"{self.scope}{name}."
        x3 = self.mul(self.mul(x, x, "x2"), x, "x3")
        inner = self.add(x, self.unary(x3, "scale_c"), "inner")
        th = self.unary(self.unary(inner, "scale_sqrt2pi"), "tanh")
        half = self.unary(self.unary(th, "add_one"), "half")
        y = self.mul(x, half, "out")
        self.scope = saved
        return y

    def softmax(self, x: str, name: str = "softmax") -> str:
        dims = self.shape(x).dims
        last = len(dims) - 1
        keep = list(range(last))
        saved, self.scope = self.scope, f"{self.scope}{name}."
        e = self.unary(x, "exp")
        z = self.reduce_sum(e, [last], "denom")
        r = self.unary(z, "reciprocal")
        y = self.mul(e, self.broadcast(r, dims, keep, "denom_b"), "out")
        self.scope = saved
        return y

    # backward --------------------------------------------------------------
    def backward(self, seeds: Mapping[str, str]) -> dict[str, str]:
        """Reverse-mode pass from ``seeds`` (forward op -> its gradient op).

        Returns the gradient op of every trainable parameter reached.
        """
        fwd = [k for k in self.order if self.ops[k].attrs.get("phase", "fwd") == "fwd"
               and k in self._needs_grad]
        partial: dict[str, list[str]] = {k: [v] for k, v in seeds.items()}
        grads: dict[str, str] = {}
        self.phase = "bwd"
        try:
            for k in reversed(fwd):
                if k not in partial:
                    continue
                self.origin = k
                gs = partial.pop(k)
                g = gs[0]
                for other in gs[1:]:
                    g = self.add(g, other, f"{k}.grad_acc")
                grads[k] = g
                op = self.ops[k]
                if not op.inputs:
                    continue
                for slot, gi in self._vjp(op, g):
                    src = op.inputs[slot]
                    if src in self._needs_grad:
                        partial.setdefault(src, []).append(gi)
        finally:
            self.phase = "fwd"
            self.origin = None
        return {k: grads[k] for k in self.order if k in self.trainable and k in grads}

    def _vjp(self, op: Operator, g: str):
        k, ins, kind = op.id, op.inputs, op.kind
        want = [i in self._needs_grad for i in ins]
        name = f"{k}.d"
        if kind == "MatMul":
            ta, tb = bool(op.attrs.get("transpose_a")), bool(op.attrs.get("transpose_b"))
            a, b = ins
            if want[0]:
                # dA = G B^T (or B G^T when A was transposed)
                if ta:
                    yield 0, self.matmul(b, g, name + "a", ta=tb, tb=True)
                else:
                    yield 0, self.matmul(g, b, name + "a", tb=not tb)
            if want[1]:
                if tb:
                    yield 1, self.matmul(g, a, name + "b", ta=True, tb=ta)
                else:
                    yield 1, self.matmul(a, g, name + "b", ta=not ta)
        elif kind == "Add":
            for s in range(2):
                if want[s]:
                    yield s, g
        elif kind == "Mul":
            a, b = ins
            if a == b:
                yield 0, self.unary(self.mul(g, a, name + "sq"), "double", name + "sq2")
                return
            if want[0]:
                yield 0, self.mul(g, b, name + "a")
            if want[1]:
                yield 1, self.mul(g, a, name + "b")
        elif kind == "UnaryElementwise":
            fn = op.attrs.get("fn", "f")
            if fn == "cast":
                src = self.shape(ins[0])
                yield 0, self.add_op("UnaryElementwise", (g,), name, src.dims, {"fn": "cast"}, src.dtype)
                return
            local = self.unary(ins[0], f"d_{fn}", name + "local")
            yield 0, self.mul(g, local, name)
        elif kind == "Reshape":
            yield 0, self.reshape(g, self.shape(ins[0]).dims, name)
        elif kind == "Transpose":
            perm = list(op.attrs.get("perm", range(op.output_shape.rank - 1, -1, -1)))
            inv = [perm.index(i) for i in range(len(perm))]
            yield 0, self.transpose(g, inv, name)
        elif kind == "ReduceSum":
            src = self.shape(ins[0])
            axes = set(op.attrs.get("axes", range(src.rank)))
            kept = [i for i in range(src.rank) if i not in axes]
            yield 0, self.broadcast(g, src.dims, kept, name)
        elif kind == "Broadcast":
            mapping = list(op.attrs["dims"])
            drop = [j for j in range(op.output_shape.rank) if j not in mapping]
            yield 0, self.reduce_sum(g, drop, name)
        else:
            raise ValueError(f"no gradient rule for {kind}")

    def adam_updates(self, grads: Mapping[str, str], loss_scaling: bool = False) -> list[str]:
        """Adam-like in-place updates; returns the aliasing update ops.

        With ``loss_scaling`` gradients are unscaled first and every step is
        gated on a global all-finite flag, as in dynamic loss scaling.
        """
        outs = []
        self.phase = "update"
        try:
            grads = dict(grads)
            keep = None
            if loss_scaling:
                found = None
                for p in sorted(grads, key=lambda k: self.order.index(grads[k])):
                    self.scope = f"{p}.scaler."
                    g = self.unary(grads[p], "unscale")
                    bad = self.unary(g, "nonfinite")
                    bad = self.reduce_sum(bad, list(range(self.shape(bad).rank)), "nonfinite_count")
                    found = bad if found is None else self.add(found, bad, "nonfinite_total")
                    grads[p] = g
                self.scope = ""
                keep = self.unary(found, "all_finite", "scaler.all_finite")
            for p, g in grads.items():
                dims = self.shape(p).dims
                saved, self.scope = self.scope, f"{p}.adam."
                self.phase = "fwd"
                m = self.input("m", dims)
                v = self.input("v", dims)
                self.phase = "update"
                m1 = self.add(self.unary(m, "scale_beta1"), self.unary(g, "scale_1m_beta1"), "m_new")
                self.ops[m1] = _with_attr(self.ops[m1], "alias", m)
                g2 = self.mul(g, g, "g2")
                v1 = self.add(self.unary(v, "scale_beta2"), self.unary(g2, "scale_1m_beta2"), "v_new")
                self.ops[v1] = _with_attr(self.ops[v1], "alias", v)
                denom = self.unary(self.unary(v1, "sqrt"), "add_eps")
                m_hat = self.unary(m1, "bias_correct1", "m_hat")
                denom = self.unary(denom, "bias_correct2", "v_hat")
                step = self.mul(m_hat, self.unary(denom, "reciprocal"), "ratio")
                step = self.add(step, self.unary(p, "scale_wd"), "decayed")
                step = self.unary(step, "scale_neg_lr")
                if keep is not None:
                    step = self.mul(step, self.broadcast(keep, dims, [], "keep_b"), "gated")
                w1 = self.add(p, step, "w_new")
                self.ops[w1] = _with_attr(self.ops[w1], "alias", p)
                outs += [m1, v1, w1]
                self.scope = saved
        finally:
            self.phase = "fwd"
        return outs

    def build(self, outputs: Sequence[str] | None = None) -> TensorProgram:
        return TensorProgram([self.ops[k] for k in self.order], outputs)


def _with_attr(op: Operator, key: str, value) -> Operator:
    attrs = dict(op.attrs)
    attrs[key] = value
    return Operator(op.id, op.kind, op.inputs, op.output_shape, attrs, op.flops)


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class FixtureSpec:
    family: str
    layers: int = 2
    hidden: int = 64
    batch: int = 8
    seed: int = 0
    seq: int = 16
    heads: int = 4
    experts: int = 4
    train: bool | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {', '.join(FAMILIES)}")
        for name in ("layers", "hidden", "batch", "seq", "heads", "experts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.family == "gpt_like" and self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")


def _finish(b: GraphBuilder, loss_src: str, train: bool, loss_scaling: bool = False) -> TensorProgram:
    if not train:
        return b.build()
    seed = b.unary(loss_src, "d_loss_scaled" if loss_scaling else "d_loss")
    b.ops[seed] = _with_attr(b.ops[seed], "phase", "bwd")
    b.ops[seed] = _with_attr(b.ops[seed], "origin", loss_src)
    grads = b.backward({loss_src: seed})
    outs = b.adam_updates(grads, loss_scaling)
    return b.build(outs)


def mlp(layers: int = 4, hidden: int = 8, batch: int = 4, train: bool = False, seed: int = 0) -> TensorProgram:
    """``1 + 4 * layers`` ops forward-only."""
    b = GraphBuilder()
    x = b.input("x", [batch, hidden])
    for i in range(layers):
        b.scope = f"l{i}."
        w = b.param("w", [hidden, hidden])
        h = b.matmul(x, w)
        x = b.unary(b.add(x, h, "residual"), "relu")
    b.scope = ""
    return _finish(b, x, train)


def gpt_like(layers: int = 2, hidden: int = 64, batch: int = 2, seq: int = 16, heads: int = 4,
             train: bool = True, seed: int = 0) -> TensorProgram:
    """Pre-norm transformer blocks over ``batch * seq`` tokens.

    Parameters are f32 and cast to f16 for the projections; norms run in
    f32 and training uses dynamic loss scaling.  Attention scores get an additive mask, and dropout masks (given
    as inputs) follow the attention probabilities and both residual
    branches.
    """
    b = GraphBuilder()
    t = batch * seq
    dh = hidden // heads
    x = b.cast(b.input("tokens", [t, hidden]), "f16", "tokens_f16")

    def linear(h, name, n_in, n_out):
        w = b.cast(b.param(f"{name}_w", [n_in, n_out]), "f16", f"{name}_w16")
        y = b.matmul(h, w, name)
        bias = b.cast(b.param(f"{name}_b", [n_out]), "f16", f"{name}_b16")
        return b.add(y, b.broadcast(bias, [t, n_out], [1], f"{name}_bias_b"), f"{name}_biased")

    def dropout(h, name):
        mask = b.input(f"{name}_mask", b.shape(h).dims)
        return b.unary(b.mul(h, b.cast(mask, "f16", f"{name}_mask16"), f"{name}_drop"), "inv_keep", f"{name}_rescale")

    for i in range(layers):
        b.scope = f"b{i}."
        h = b.layer_norm(x, hidden, "ln1")
        q = linear(h, "q", hidden, hidden)
        k = linear(h, "k", hidden, hidden)
        v = linear(h, "v", hidden, hidden)

        def heads_view(z, nm):
            z = b.reshape(z, [batch, seq, heads, dh], nm + "_split")
            z = b.transpose(z, [0, 2, 1, 3], nm + "_perm")
            return b.reshape(z, [batch * heads, seq, dh], nm + "_heads")

        qh, kh, vh = heads_view(q, "q"), heads_view(k, "k"), heads_view(v, "v")
        kt = b.transpose(kh, [0, 2, 1], "k_t")
        scores = b.unary(b.matmul(qh, kt, "scores"), "scale_rsqrt_dh", "scores_scaled")
        amask = b.cast(b.input("attn_mask", [seq, seq]), "f16", "attn_mask16")
        scores = b.add(scores, b.broadcast(amask, [batch * heads, seq, seq], [1, 2], "attn_mask_b"), "masked")
        probs = dropout(b.softmax(scores), "attn")
        ctx = b.matmul(probs, vh, "ctx")
        ctx = b.reshape(ctx, [batch, heads, seq, dh], "ctx_split")
        ctx = b.transpose(ctx, [0, 2, 1, 3], "ctx_perm")
        ctx = b.reshape(ctx, [t, hidden], "ctx_merge")
        attn = dropout(linear(ctx, "attn_out", hidden, hidden), "resid1")
        x = b.add(x, attn, "residual1")
        h = b.layer_norm(x, hidden, "ln2")
        f = b.gelu(linear(h, "ffn_in", hidden, 4 * hidden))
        f = dropout(linear(f, "ffn_out", 4 * hidden, hidden), "resid2")
        x = b.add(x, f, "residual2")
    b.scope = ""
    x = b.layer_norm(x, hidden, "ln_f")
    return _finish(b, x, train, loss_scaling=True)


def moe_like(layers: int = 2, hidden: int = 32, batch: int = 8, experts: int = 4,
             train: bool = False, seed: int = 0) -> TensorProgram:
    """Token-wise gated mixture: sigmoid gates, one FFN per expert."""
    b = GraphBuilder()
    x = b.input("x", [batch, hidden])
    for i in range(layers):
        b.scope = f"l{i}."
        acc = None
        for e in range(experts):
            gate = b.matmul(x, b.param(f"router{e}", [hidden, 1]), f"router{e}")
            gate = b.unary(b.reshape(gate, [batch], f"gate{e}_flat"), "sigmoid", f"gate{e}")
            gate = b.broadcast(gate, [batch, hidden], [0], f"gate{e}_b")
            h = b.unary(b.matmul(x, b.param(f"e{e}_w1", [hidden, 2 * hidden]), f"e{e}_in"), "relu", f"e{e}_act")
            h = b.matmul(h, b.param(f"e{e}_w2", [2 * hidden, hidden]), f"e{e}_out")
            h = b.mul(h, gate, f"e{e}_gated")
            acc = h if acc is None else b.add(acc, h, "combine")
        x = b.add(x, acc, "residual")
    b.scope = ""
    return _finish(b, x, train)


def skipnet(layers: int = 4, hidden: int = 16, batch: int = 8, train: bool = False,
            seed: int = 0) -> TensorProgram:
    """Stack with an additive skip from every layer to the one two above it."""
    b = GraphBuilder()
    hist = [b.input("x", [batch, hidden])]
    for i in range(layers):
        b.scope = f"l{i}."
        h = b.unary(b.matmul(hist[-1], b.param("w", [hidden, hidden])), "relu")
        if len(hist) >= 2:
            h = b.add(h, hist[-2], "skip")
        hist.append(h)
    b.scope = ""
    return _finish(b, hist[-1], train)


def generate(spec: FixtureSpec) -> TensorProgram:
    f = spec.family
    if f == "mlp":
        return mlp(spec.layers, spec.hidden, spec.batch, bool(spec.train), spec.seed)
    if f == "gpt_like":
        train = True if spec.train is None else spec.train
        return gpt_like(spec.layers, spec.hidden, spec.batch, spec.seq, spec.heads, train, spec.seed)
    if f == "moe_like":
        return moe_like(spec.layers, spec.hidden, spec.batch, spec.experts, bool(spec.train), spec.seed)
    return skipnet(spec.layers, spec.hidden, spec.batch, bool(spec.train), spec.seed)


# --------------------------------------------------------------------------
# small random programs


def chain(n: int, dims: Sequence[int] = (8, 8)) -> TensorProgram:
    """``x -> u1 -> ... -> u{n-1}`` unary chain with ``n`` ops (ids op1..opn)."""
    b = GraphBuilder()
    prev = b.add_op("Input", (), "op1", dims)
    for i in range(2, n + 1):
        prev = b.add_op("UnaryElementwise", (prev,), f"op{i}", attrs={"fn": "relu"})
    return b.build()


def random_dag(n: int, seed: int, edge_p: float = 0.3, dims: Sequence[int] = (4, 4)) -> TensorProgram:
    """Random connected DAG of unary/add ops over one tensor shape.

    Op ``i`` consumes op ``i-1`` and, with probability ``edge_p``, one
    random earlier op as well.  Sizes vary through the dtype.
    """
    rng = random.Random(seed)
    b = GraphBuilder()
    ids = [b.add_op("Input", (), "n00", dims)]
    for i in range(1, n):
        prev = ids[-1]
        name = f"n{i:02d}"
        dtype = rng.choice(["f32", "f16", "f32", "i8"])
        if i >= 2 and rng.random() < edge_p:
            k = b.add_op("Add", (prev, ids[rng.randrange(0, i - 1)]), name)
        else:
            k = b.add_op("UnaryElementwise", (prev,), name, dims, {"fn": "cast"}, dtype)
        ids.append(k)
    return b.build()


def random_spmd_program(seed: int, max_ops: int = 8) -> TensorProgram:
    """Random program of at most ``max_ops`` ops mixing matmuls, elementwise
    ops, reshapes and transposes over small even extents."""
    rng = random.Random(seed)
    b = GraphBuilder()
    dims = [rng.choice([4, 8]), rng.choice([4, 8])]
    live = [b.input("x", dims)]
    while len(b.order) < max_ops:
        room = max_ops - len(b.order)
        x = rng.choice(live[-3:])
        s = b.shape(x).dims
        r = rng.random()
        if r < 0.3 and room >= 2 and len(s) == 2:
            w = b.param("w", [s[1], rng.choice([4, 8])])
            live.append(b.matmul(x, w))
        elif r < 0.45 and len(s) == 2:
            live.append(b.transpose(x, [1, 0]))
        elif r < 0.6:
            numel = math.prod(s)
            options = [d for d in ([numel // 4, 4], [4, numel // 4], [numel // 2, 2], [numel]) if list(d) != list(s)]
            live.append(b.reshape(x, rng.choice(options)))
        elif r < 0.8:
            others = [y for y in live if y != x and b.shape(y) == b.shape(x)]
            if others:
                live.append(b.add_op(rng.choice(["Add", "Mul"]), (x, rng.choice(others)), "ew"))
            else:
                live.append(b.unary(x, "relu"))
        else:
            live.append(b.unary(x, rng.choice(["relu", "exp"])))
    # every op must reach an output: make all sinks outputs
    return b.build()


# --------------------------------------------------------------------------
# oracles


def brute_force_spmd(cost_graph, limit: int = 1_000_000):
    """Exhaustive optimum of the strategy objective over a cost graph.

    Returns ``(cost, choice_vector)``.
    """
    sizes = cost_graph.sizes()
    total_n = math.prod(sizes)
    if total_n > limit:
        raise ValueError(f"search space {total_n} exceeds {limit}")
    n = len(sizes)
    total = np.zeros(sizes)
    for i, u in enumerate(cost_graph.unary):
        sh = [1] * n
        sh[i] = sizes[i]
        total = total + u.reshape(sh)
    for (a, bb), m in cost_graph.pairs.items():
        sh = [1] * n
        sh[a], sh[bb] = sizes[a], sizes[bb]
        total = total + m.reshape(sh)
    flat = int(np.argmin(total))
    return float(total.flat[flat]), [int(i) for i in np.unravel_index(flat, sizes)]


def brute_force_stages(g: TensorProgram, d: int, bounds: Mapping[str, tuple[int, int]] | None = None,
                       weights: Mapping[tuple[str, str], float] | None = None, limit: int = 5_000_000):
    """Minimum cut volume over stage assignments by depth-first enumeration.

    Assignments respect precedence, every stage in ``0..d-1`` is used, and
    each op stays inside ``bounds`` when given.  Edge weights default to the
    producer's output bytes.  Returns ``(volume, assignment)`` or
    ``(inf, None)`` when nothing is feasible.
    """
    order = list(g.topo)
    if weights is None:
        weights = {(s, k): float(g[s].output_shape.nbytes) for s, k in g.edges()}
    preds = {k: list(dict.fromkeys(g[k].inputs)) for k in order}
    w_in = {k: [(p, weights[(p, k)]) for p in preds[k]] for k in order}
    best = [math.inf, None]
    stage: dict[str, int] = {}
    used = [0] * d
    visited = [0]

    def rec(i: int, cost: float):
        if cost >= best[0]:
            return
        visited[0] += 1
        if visited[0] > limit:
            raise ValueError("stage enumeration budget exceeded")
        if i == len(order):
            if all(used):
                best[0], best[1] = cost, dict(stage)
            return
        k = order[i]
        lo = max((stage[p] for p in preds[k]), default=0)
        hi = d - 1
        if bounds is not None:
            lo = max(lo, bounds[k][0])
            hi = min(hi, bounds[k][1])
        # remaining ops must be able to cover the unused stages
        missing = sum(1 for u in used if not u)
        if missing > len(order) - i:
            return
        for s in range(lo, hi + 1):
            extra = sum(w for p, w in w_in[k] if stage[p] != s)
            stage[k] = s
            used[s] += 1
            rec(i + 1, cost + extra)
            used[s] -= 1
            del stage[k]

    rec(0, 0.0)
    return best[0], best[1]
