import math

import pytest

from parashard import fixtures as fx
from parashard.ir import parse_program, to_json, to_text
from parashard.sharding import REPLICATED, DeviceMesh, Shard, Strategy, generate_candidates
from parashard.spmd import build_cost_graph


def kinds(g, kind):
    return [k for k in g.topo if g[k].kind == kind]


def test_mlp_small():
    g = fx.mlp(2, 8, 4)
    assert len(kinds(g, "MatMul")) == 2
    assert len(kinds(g, "Parameter")) == 2
    assert to_text(parse_program(to_text(g))) == to_text(g)


def test_gpt_like_matmul_pattern():
    g = fx.gpt_like(1, 64, train=False)
    mm = kinds(g, "MatMul")
    assert len(mm) >= 6
    for name in ("q", "k", "v", "attn_out", "ffn_in", "ffn_out", "scores", "ctx"):
        assert f"b0.{name}" in mm
    # ffn widens by 4x then narrows back
    assert g["b0.ffn_in"].output_shape.dims[-1] == 4 * g["b0.ffn_out"].output_shape.dims[-1]


def test_skipnet_has_skip_edges():
    g = fx.skipnet(4)
    layer = {}
    for k in g.topo:
        if k.startswith("l"):
            layer[k] = int(k.split(".")[0][1:])
    skips = [(a, b) for a, b in g.edges() if a in layer and b in layer and layer[b] - layer[a] >= 2]
    skips += [(a, b) for a, b in g.edges() if a == "x" and b in layer and layer[b] >= 1]
    assert skips


def test_moe_has_experts():
    g = fx.moe_like(1, experts=3)
    assert len(kinds(g, "MatMul")) >= 3


@pytest.mark.parametrize("family", fx.FAMILIES)
@pytest.mark.parametrize("train", [False, True])
def test_deterministic_and_round_trip(family, train):
    spec = fx.FixtureSpec(family, layers=2, hidden=32, train=train)
    a, b = fx.generate(spec), fx.generate(spec)
    assert to_text(a) == to_text(b)
    assert to_text(parse_program(to_text(a))) == to_text(a)
    assert to_json(parse_program(to_json(a), "json")) == to_json(a)


@pytest.mark.parametrize("family", fx.FAMILIES)
def test_training_graphs_have_phases(family):
    g = fx.generate(fx.FixtureSpec(family, layers=1, hidden=32, train=True))
    phases = {g[k].phase for k in g.topo}
    assert phases == {"fwd", "bwd", "update"}


@pytest.mark.parametrize(
    "kw",
    [dict(family="cnn"), dict(family="mlp", layers=0), dict(family="gpt_like", hidden=30, heads=4)],
)
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        fx.FixtureSpec(**kw)


@pytest.mark.parametrize("seed", range(10))
def test_random_generators(seed):
    g = fx.random_spmd_program(seed)
    assert len(g.topo) <= 8
    d = fx.random_dag(12, seed)
    assert len(d.topo) == 12
    assert fx.random_dag(12, seed).edges() == d.edges()


def test_brute_force_single_op():
    g = fx.chain(1, dims=(8, 8))
    cands = {"op1": [Strategy(REPLICATED, (), 1), Strategy(Shard(0, 4), (), 2), Strategy(Shard(1, 4), (), 2)]}
    cg = build_cost_graph(g, cands, DeviceMesh.uniform([2]))
    val, choice = fx.brute_force_spmd(cg)
    assert val == min(cg.unary[0]) and len(choice) == 1


def test_brute_force_spmd_limit():
    g = fx.chain(8)
    m = DeviceMesh.uniform([2])
    cg = build_cost_graph(g, generate_candidates(g, m), m)
    assert math.prod(cg.sizes()) > 10
    with pytest.raises(ValueError):
        fx.brute_force_spmd(cg, limit=10)


def test_brute_force_stages_small():
    g = fx.chain(4)
    val, asg = fx.brute_force_stages(g, 2)
    # any single cut of a uniform chain costs one tensor
    assert val == g["op1"].output_shape.nbytes
    assert sorted(set(asg.values())) == [0, 1]
    assert fx.brute_force_stages(g, 5) == (math.inf, None)
    with pytest.raises(ValueError):
        fx.brute_force_stages(fx.random_dag(15, 0), 3, limit=10)
