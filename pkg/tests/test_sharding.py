import itertools
import math

import numpy as np
import pytest

from parashard import fixtures as fx
from parashard.ir import Operator, TensorShape, parse_text
from parashard.sharding import (
    PARTIAL,
    REPLICATED,
    DeviceMesh,
    ProgramView,
    Shard,
    Strategy,
    divisors,
    element_device_map,
    enumerate_specs,
    generate_candidates,
    op_strategies,
    parse_spec,
    reshape_stride_passthrough,
    reshard_cost,
    spec_valid,
)

MiB = 1 << 20


def mesh(d, bw=1e10, alpha=1e-5):
    return DeviceMesh.uniform([d], bandwidth=bw, alpha=alpha)


def test_enumerate_specs_counts():
    assert len(enumerate_specs(TensorShape((256, 256)), 4)) == 2 * len(divisors(64)) + 2 == 16
    specs = enumerate_specs(TensorShape((4, 2)), 2)
    assert set(specs) == {Shard(0, 1), Shard(0, 2), Shard(1, 1), REPLICATED, PARTIAL}
    # two strides on dim 0, one on dim 1, plus R and P
    assert len(specs) == 5


def test_enumerate_specs_small_example_exact():
    # Shard(0, stride 1 or 2), Shard(1, stride 1), R, P
    specs = enumerate_specs(TensorShape((4, 2)), 2)
    shards = [s for s in specs if isinstance(s, Shard)]
    assert sorted(shards) == [Shard(0, 1), Shard(0, 2), Shard(1, 1)]
    assert specs[-2:] == [REPLICATED, PARTIAL]


def test_enumerate_specs_trivial_axis():
    assert enumerate_specs(TensorShape((8, 8)), 1) == [REPLICATED]


def test_enumerate_specs_skip_indivisible_dims():
    specs = enumerate_specs(TensorShape((3, 4)), 2)
    assert all(s.dim == 1 for s in specs if isinstance(s, Shard))


def test_spec_validity():
    shape = TensorShape((8, 4))
    assert spec_valid(Shard(0, 4), shape, 2)
    assert spec_valid(Shard(0, 1), shape, 2)
    assert not spec_valid(Shard(0, 3), shape, 2)
    assert not spec_valid(Shard(2, 1), shape, 2)
    assert spec_valid(REPLICATED, shape, 2)


@pytest.mark.parametrize("text", ["R", "P", "S(1,2)", "S(0, 4)"])
def test_parse_spec_round_trip(text):
    assert str(parse_spec(str(parse_spec(text)))) == str(parse_spec(text))


def test_parse_spec_max_stride():
    assert parse_spec("S(0)", TensorShape((8, 4)), 2) == Shard(0, 4)
    with pytest.raises(ValueError):
        parse_spec("S(0)")
    with pytest.raises(ValueError):
        parse_spec("Q")


def test_reshard_identity_is_free():
    shape = TensorShape((256, 256))
    for s in enumerate_specs(shape, 4):
        rc = reshard_cost(s, s, shape, mesh(4), 0)
        assert rc.collective == "None" and rc.bytes == 0 and rc.seconds == 0


def test_reshard_allreduce_example():
    shape = TensorShape((MiB // 4,))  # 1 MiB of f32
    rc = reshard_cost(PARTIAL, REPLICATED, shape, mesh(4, bw=1e9, alpha=2e-6), 0)
    assert rc.collective == "AllReduce"
    assert rc.bytes == pytest.approx(1.5 * MiB)
    assert rc.seconds == pytest.approx(2e-6 + 1.5 * MiB / 1e9)


def test_reshard_alltoall_example():
    shape = TensorShape((512, 512))  # 1 MiB
    rc = reshard_cost(Shard(0, 128), Shard(1, 128), shape, mesh(4), 0)
    assert rc.collective == "AllToAll"
    assert rc.bytes == pytest.approx(0.1875 * MiB)


def test_reshard_other_collectives():
    shape = TensorShape((64, 64))
    S = shape.nbytes
    m = mesh(4)
    assert reshard_cost(PARTIAL, Shard(0, 16), shape, m, 0).collective == "ReduceScatter"
    assert reshard_cost(PARTIAL, Shard(0, 16), shape, m, 0).bytes == pytest.approx(0.75 * S)
    assert reshard_cost(Shard(0, 16), REPLICATED, shape, m, 0).collective == "AllGather"
    assert reshard_cost(Shard(0, 16), REPLICATED, shape, m, 0).bytes == pytest.approx(0.75 * S)
    assert reshard_cost(Shard(0, 16), Shard(0, 4), shape, m, 0).collective == "AllToAll"
    assert reshard_cost(REPLICATED, Shard(1, 16), shape, m, 0).bytes == 0


def test_reshard_cost_nonnegative_finite_all_pairs():
    shape = TensorShape((8, 4))
    specs = enumerate_specs(shape, 2)
    for a, b in itertools.product(specs, specs):
        rc = reshard_cost(a, b, shape, mesh(2), 0)
        assert 0 <= rc.bytes < math.inf and 0 <= rc.seconds < math.inf
        assert (rc.collective == "None") == (rc.bytes == 0)


def _reshape(src, dst):
    return Operator("r", "Reshape", ("x",), TensorShape(tuple(dst)))


def test_reshape_passthrough_flatten():
    out = reshape_stride_passthrough(_reshape((8, 4), (32,)), Shard(0, 4), 2, TensorShape((8, 4)))
    assert out == Shard(0, 16)


def test_reshape_passthrough_identity():
    for spec in enumerate_specs(TensorShape((8, 4)), 2):
        assert reshape_stride_passthrough(_reshape((8, 4), (8, 4)), spec, 2, TensorShape((8, 4))) == spec


def test_reshape_passthrough_non_max_stride():
    out = reshape_stride_passthrough(_reshape((4, 8), (8, 4)), Shard(1, 1), 2, TensorShape((4, 8)))
    assert out == Shard(1, 1)
    assert out.stride != 4 // 2  # not the maximum stride of the output dim


def _shapes(n):
    out = []
    for r in (1, 2, 3):
        for dims in itertools.product(divisors(n), repeat=r):
            if math.prod(dims) == n:
                out.append(dims)
    return out


@pytest.mark.parametrize("numel", [8, 16, 32, 64])
def test_reshape_passthrough_exhaustive(numel):
    d = 2
    for src, dst in itertools.product(_shapes(numel), repeat=2):
        s_in, s_out = TensorShape(src), TensorShape(dst)
        op = _reshape(src, dst)
        for spec in enumerate_specs(s_in, d):
            if spec == PARTIAL:
                continue
            got = reshape_stride_passthrough(op, spec, d, s_in)
            want = element_device_map(s_in, spec, d)
            if got is None:
                # nothing on the output reproduces the layout
                assert not any(
                    np.array_equal(element_device_map(s_out, o, d), want)
                    for o in enumerate_specs(s_out, d) if o != PARTIAL
                )
            else:
                assert spec_valid(got, s_out, d)
                assert np.array_equal(element_device_map(s_out, got, d), want)


def test_matmul_candidates_cover_the_three_splits():
    g = parse_text("""
    a = input f32[8,16]
    w = param f32[16,4]
    y = matmul(a, w)
    z = unary(y)
    """)
    cands = generate_candidates(g, mesh(2))
    outs = {s.out for s in cands["y"]}
    assert Shard(0, 4) in outs  # row split
    assert Shard(1, 2) in outs  # column split
    assert PARTIAL in outs  # contraction split
    contraction = [s for s in cands["y"] if s.out == PARTIAL]
    assert contraction[0].ins == (Shard(1, 8), Shard(0, 8))


def test_elementwise_inherits_matmul_spec():
    g = parse_text("""
    a = input f32[8,16]
    w = param f32[16,4]
    b = param f32[8,4]
    y = matmul(a, w)
    z = add(y, b)
    """)
    cands = generate_candidates(g, mesh(2))
    add_outs = {s.out for s in cands["z"]}
    for s in cands["y"]:
        if isinstance(s.out, Shard):
            assert s.out in add_outs


def test_reshape_gets_non_max_stride_candidate():
    g = parse_text("""
    a = input f32[4,16]
    w = param f32[16,8]
    y = matmul(a, w)
    r = reshape(y) : f32[32]
    """)
    cands = generate_candidates(g, mesh(2))
    assert Shard(1, 4) in {s.out for s in cands["y"]}
    assert Shard(0, 4) in {s.out for s in cands["r"]}


@pytest.mark.parametrize("family", fx.FAMILIES)
def test_candidates_nonempty_dedup_with_replicated(family):
    g = fx.generate(fx.FixtureSpec(family, layers=1))
    cands = generate_candidates(g, mesh(2))
    for k in g.topo:
        lst = cands[k]
        assert lst and len(set(lst)) == len(lst)
        assert any(s.out == REPLICATED and all(i == REPLICATED for i in s.ins) for s in lst)


def test_trivial_axis_only_replicated():
    g = fx.mlp(2, 8, 4)
    cands = generate_candidates(g, DeviceMesh.uniform([1]))
    assert all(len(v) == 1 and v[0].out == REPLICATED for v in cands.values())


def test_strategy_json_round_trip():
    s = Strategy(PARTIAL, (Shard(1, 8), Shard(0, 8)), 2)
    assert Strategy.from_json(s.to_json()) == s


def test_pin_restricts_candidates():
    g = parse_text("""
    a = input f32[8,16]
    w = param f32[16,4] {pin="S(1)"}
    y = matmul(a, w)
    """)
    cands = generate_candidates(g, mesh(2))
    assert {s.out for s in cands["w"]} == {Shard(1, 2)}


def test_mesh_validation():
    with pytest.raises(ValueError):
        DeviceMesh((2, 0), (1.0, 1.0), (0.0, 0.0))
    with pytest.raises(ValueError):
        DeviceMesh((2,), (0.0,), (0.0,))
    assert DeviceMesh.uniform([2, 4]).size == 8


def _full(g, d):
    v = ProgramView.from_program(g)
    return {k: op_strategies(v.ops[k], d, True, k in v.outputs) for k in v.topo}


@pytest.mark.parametrize("d", [2, 4])
def test_candidate_restriction_keeps_small_optimum(d):
    from parashard.spmd import build_cost_graph

    m = mesh(d)
    checked = 0
    for seed in range(60):
        g = fx.random_spmd_program(seed, max_ops=6)
        full = _full(g, d)
        if math.prod(len(x) for x in full.values()) > 200_000:
            continue
        a, _ = fx.brute_force_spmd(build_cost_graph(g, full, m), limit=10**7)
        b, _ = fx.brute_force_spmd(build_cost_graph(g, generate_candidates(g, m), m), limit=10**7)
        assert b == pytest.approx(a, rel=1e-12, abs=0)
        checked += 1
    assert checked >= 30
