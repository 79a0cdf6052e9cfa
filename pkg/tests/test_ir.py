import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parashard import fixtures as fx
from parashard.ir import (
    CycleError,
    DanglingReferenceError,
    IRSyntaxError,
    Operator,
    ShapeError,
    TensorProgram,
    TensorShape,
    ancestor_matrix,
    ancestors_descendants,
    compute_backbone,
    parse_json,
    parse_program,
    parse_text,
    to_json,
    to_text,
    topo_order,
)


def small(text):
    return parse_text(text)


CHAIN = """
A = input : f32[4,4]
B = unary(A) : f32[4,4] {fn=relu}
C = unary(B) : f32[4,4] {fn=relu}
"""

DIAMOND = """
A = input : f32[4,4]
C = unary(A) : f32[4,4]
B = unary(A) : f32[4,4]
D = add(B, C)
"""


def test_two_op_program():
    g = small("p = param f32[4,8]; y = matmul(p, p^T)")
    assert len(g) == 2
    assert g.parameter_ids == ("p",)
    assert g["y"].output_shape.dims == (4, 4)
    assert g["y"].flops == 2 * 4 * 8 * 4


def test_reshape_must_keep_element_count():
    with pytest.raises(ShapeError):
        small("x = input f32[4,8]; y = reshape(x) : f32[3,8]")


def test_matmul_contraction_mismatch():
    with pytest.raises(ShapeError):
        small("a = input f32[4,8]; b = param f32[4,8]; y = matmul(a, b)")


def test_syntax_error_has_position():
    with pytest.raises(IRSyntaxError) as exc:
        small("x = input f32[4,8]\ny = add(x x)")
    assert exc.value.line == 2


def test_dangling_reference():
    with pytest.raises(DanglingReferenceError):
        small("x = input f32[4]; y = add(x, z)")


def test_cycle_rejected():
    ops = [
        Operator("a", "UnaryElementwise", ("b",), TensorShape((4,))),
        Operator("b", "UnaryElementwise", ("a",), TensorShape((4,))),
    ]
    with pytest.raises(CycleError):
        TensorProgram(ops)


def test_unreachable_op_rejected():
    with pytest.raises(Exception):
        small("x = input f32[4]; y = unary(x); z = unary(x)\noutput y")


def test_mlp_fixture_op_count():
    g = fx.mlp(layers=4, hidden=8, batch=4)
    assert len(g) == 17
    assert sum(op.kind == "MatMul" for op in g) == 4
    assert sum(op.kind == "Add" for op in g) == 4
    assert sum(op.kind == "UnaryElementwise" for op in g) == 4


def test_topo_chain_and_diamond():
    assert topo_order(small(CHAIN)) == ["A", "B", "C"]
    assert topo_order(small(DIAMOND)) == ["A", "B", "C", "D"]


def test_topo_respects_edges_on_fixture():
    g = fx.mlp(layers=4, hidden=8, batch=4)
    order = topo_order(g)
    assert sorted(order) == sorted(op.id for op in g)
    pos = {k: i for i, k in enumerate(order)}
    assert all(pos[a] < pos[b] for a, b in g.edges())


def test_ancestors_descendants_examples():
    assert ancestors_descendants(small(CHAIN), "B") == ({"A"}, {"C"})
    assert ancestors_descendants(small(DIAMOND), "B") == ({"A"}, {"D"})
    with pytest.raises(KeyError):
        ancestors_descendants(small(CHAIN), "nope")


def _closure(g):
    order = list(g.topo)
    n = len(order)
    idx = {k: i for i, k in enumerate(order)}
    reach = np.zeros((n, n), bool)
    for a, b in g.edges():
        reach[idx[a], idx[b]] = True
    for k in range(n):  # Floyd-Warshall style
        reach |= reach[:, [k]] & reach[[k], :]
    return order, reach


@pytest.mark.parametrize("seed", range(6))
def test_ancestors_match_transitive_closure(seed):
    g = fx.random_dag(30, seed)
    order, reach = _closure(g)
    for i, k in enumerate(order):
        anc, desc = ancestors_descendants(g, k)
        assert anc == {order[j] for j in range(len(order)) if reach[j, i]}
        assert desc == {order[j] for j in range(len(order)) if reach[i, j]}
    assert (ancestor_matrix(g) == reach.T).all()


def test_backbone_chain():
    b = compute_backbone(small(CHAIN))
    assert [b.earliest[k] for k in "ABC"] == [0, 1, 2]
    assert [b.latest[k] for k in "ABC"] == [0, 1, 2]
    assert b.backbone == {"A", "B", "C"}


def test_backbone_uneven_paths():
    g = small("""
    A = input f32[4]
    B = unary(A)
    C1 = unary(A)
    C2 = unary(C1)
    D = add(B, C2)
    """)
    b = compute_backbone(g)
    assert b.earliest["B"] == 1 and b.latest["B"] == 2
    assert "B" not in b.backbone
    assert {"A", "C1", "C2", "D"} <= b.backbone


def test_backbone_invariants_and_critical_kind():
    g = fx.gpt_like(layers=2)
    b = compute_backbone(g)
    for k in g.topo:
        assert b.earliest[k] <= b.latest[k]
        assert b.earliest[k] == 1 + max((b.earliest[s] for s in g.producers(k)), default=-1)
    assert b.critical_nodes <= b.backbone
    assert all(g[k].kind == "MatMul" for k in b.critical_nodes)
    assert len(b.critical_nodes) / len(g) < 0.02


def test_flops_threshold_filters_critical_nodes():
    g = fx.gpt_like(layers=1)
    b_all = compute_backbone(g)
    top = max(g[k].flops for k in b_all.critical_nodes)
    assert compute_backbone(g, flops_threshold=top + 1).critical_nodes == frozenset()


@pytest.mark.parametrize("family", fx.FAMILIES)
def test_text_and_json_round_trip(family):
    g = fx.generate(fx.FixtureSpec(family, layers=2))
    text = to_text(g)
    assert to_text(parse_text(text)) == text
    js = to_json(g)
    assert to_json(parse_json(js)) == js
    assert to_text(parse_program(js, "json")) == text


def test_rank_zero_tensor():
    g = small("x = input f32[4]; s = reduce_sum(x) : f32[] {axes=[0]}")
    assert g["s"].output_shape.dims == ()


@st.composite
def dags(draw):
    n = draw(st.integers(2, 25))
    seed = draw(st.integers(0, 10_000))
    return fx.random_dag(n, seed, edge_p=draw(st.floats(0.0, 0.8)))


@settings(max_examples=40, deadline=None)
@given(dags())
def test_topo_order_property(g):
    order = topo_order(g)
    pos = {k: i for i, k in enumerate(order)}
    assert len(pos) == len(g)
    assert all(pos[a] < pos[b] for a, b in g.edges())
    assert order == topo_order(g)  # deterministic
