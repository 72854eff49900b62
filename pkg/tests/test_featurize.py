"""Feature extraction against the hand-worked golden corpus in ``tests/golden``.

Worked values, per node (4-byte elements):

* conv_relu: Conv 3->64 k3 p1 on 3x32x32 gives 2*3*3*3*64*32*32 = 3,538,944
  FLOPs; MAC (3072 + 1728 + 65536) * 4 = 281,344. ReLU on 64x32x32: 65,536
  FLOPs, MAC 131,072 * 4.
* residual_add: Add of two 64x16x16 inputs: MAC (2*16384 + 16384) * 4 = 196,608.
* classifier: Gemm 512->10 at batch 1: 2*512*10 = 10,240 FLOPs.
"""
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfseer.errors import NotFitted
from perfseer.featurize import (
    GLOBAL_FIELDS, HP_SLOTS, NODE_FIELDS, NormStats, build_perfgraph, fit_norm_stats, load_perfgraph, normalize, op_flops,
    op_mac_bytes,
)
from perfseer.graph_ir import OpKind, OpNode, from_dict, load_graph
from perfseer.synthbench import ArchSpec, gen_graph

GOLDEN = Path(__file__).parent / "golden"
EXPECTED = json.loads((GOLDEN / "expected.json").read_text())
NAMES = sorted(k for k in EXPECTED if not k.startswith("_"))


def test_corpus_size():
    assert len(NAMES) >= 5


@pytest.mark.parametrize("name", NAMES)
def test_golden_nodes(name):
    exp = EXPECTED[name]
    g = load_graph(GOLDEN / f"{name}.json")
    pg = build_perfgraph(g)
    assert [list(g.out_shapes[i]) for i in pg.node_ids] == exp["out_shapes"]
    assert [v.flops for v in pg.V] == exp["flops"]
    assert [v.mac_bytes for v in pg.V] == exp["mac_bytes"]
    assert [v.weight_bytes for v in pg.V] == exp["weight_bytes"]
    for v in pg.V:
        assert v.arith_intensity == v.flops / v.mac_bytes


@pytest.mark.parametrize("name", NAMES)
def test_golden_globals(name):
    exp = EXPECTED[name]
    pg = build_perfgraph(load_graph(GOLDEN / f"{name}.json"))
    u = pg.u
    assert u.num_nodes == len(exp["flops"])
    assert u.num_edges == exp["num_edges"]
    if "density" in exp:
        assert u.density == exp["density"]
    else:
        assert u.density == exp["density_num"] / exp["density_den"]
    assert u.flops_stats[0] == sum(exp["flops"])
    assert u.flops_stats[3] == max(exp["flops"])
    assert u.mac_stats[0] == sum(exp["mac_bytes"])
    assert u.weight_stats[0] == sum(exp["weight_bytes"])
    assert u.mean_edge_size == exp["mean_edge_size"]
    assert u.arith_intensity == sum(exp["flops"]) / sum(exp["mac_bytes"])
    tot = sum(exp["flops"])
    for v, f in zip(pg.V, exp["flops"]):
        assert v.prop_flops == (f / tot if tot else 0.0)


def test_conv_relu_proportion():
    pg = build_perfgraph(load_graph(GOLDEN / "conv_relu.json"))
    assert pg.V[0].prop_flops == pytest.approx(0.98182, abs=1e-5)
    assert pg.u.density == 0.5


def test_op_examples():
    conv = OpNode(0, OpKind.CONV2D, {"kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1, "out_channels": 64})
    assert op_flops(conv, [(1, 3, 32, 32)], (1, 64, 32, 32)) == 3_538_944
    assert op_mac_bytes(conv, [(1, 3, 32, 32)], (1, 64, 32, 32), 4, (64, 3, 3, 3)) == 281_344
    relu = OpNode(1, OpKind.RELU)
    assert op_flops(relu, [(1, 64, 16, 16)], (1, 64, 16, 16)) == 16_384
    assert op_mac_bytes(relu, [(1, 64, 16, 16)], (1, 64, 16, 16)) == 131_072
    add = OpNode(2, OpKind.ADD)
    assert op_mac_bytes(add, [(1, 64, 16, 16)] * 2, (1, 64, 16, 16)) == 196_608
    gemm = OpNode(3, OpKind.GEMM, {"out_features": 10})
    assert op_flops(gemm, [(1, 512)], (1, 10)) == 10_240


def test_single_node_density_zero():
    g = from_dict({"input_shape": [1, 4, 8, 8], "nodes": [{"id": 0, "kind": "ReLU"}], "edges": []})
    pg = build_perfgraph(g)
    assert pg.u.density == 0.0
    assert pg.u.num_edges == 0
    assert pg.edge_x.shape == (0, 5)


def test_phase_flag():
    g = load_graph(GOLDEN / "conv_relu.json")
    assert build_perfgraph(g, "infer").u.phase == 0
    assert build_perfgraph(g, "train").u.phase == 1
    with pytest.raises(ValueError):
        build_perfgraph(g, "eval")


def test_no_category_features():
    assert not any("kind" in f or "category" in f for f in NODE_FIELDS)


def graphs(n=12, seed=3):
    return [gen_graph(ArchSpec(seed=seed), [seed, i]) for i in range(n)]


def test_invariants_on_random_graphs():
    for g in graphs():
        pg = build_perfgraph(g)
        assert pg.u.flops_stats[0] == sum(v.flops for v in pg.V)
        assert sum(v.prop_flops for v in pg.V) == pytest.approx(1.0, abs=1e-9)
        assert sum(v.prop_mac for v in pg.V) == pytest.approx(1.0, abs=1e-9)
        assert sum(v.prop_weight for v in pg.V) == pytest.approx(1.0, abs=1e-9)
        for v in pg.V:
            assert v.mac_bytes > 0
            assert v.arith_intensity * v.mac_bytes == pytest.approx(v.flops, rel=1e-9, abs=0)
        for e, s, t in pg.E:
            assert e.size == np.prod(e.shape)
            assert 0 <= s < len(pg.V) and 0 <= t < len(pg.V)
        assert 0 < pg.u.density <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_permutation_relabeling(seed, rnd):
    g = gen_graph(ArchSpec(), [seed])
    raw = g.to_dict()
    ids = [n["id"] for n in raw["nodes"]]
    new = ids[:]
    rnd.shuffle(new)
    relabel = dict(zip(ids, new))
    raw["nodes"] = [{**n, "id": relabel[n["id"]]} for n in raw["nodes"]]
    rnd.shuffle(raw["nodes"])
    raw["edges"] = [[relabel[s], relabel[d]] for s, d in raw["edges"]]
    rnd.shuffle(raw["edges"])
    h = from_dict(raw)
    a, b = build_perfgraph(g), build_perfgraph(h)
    assert a.u == b.u
    by_old = {relabel[i]: v for i, v in zip(a.node_ids, a.V)}
    assert all(by_old[i] == v for i, v in zip(b.node_ids, b.V))


def test_concat_channels_ignore_input_order():
    raw = json.loads((GOLDEN / "concat.json").read_text())
    flipped = {**raw, "edges": raw["edges"][::-1]}
    a, b = (build_perfgraph(from_dict(r)) for r in (raw, flipped))
    ch = HP_SLOTS.index("in_ch")
    assert a.V[2].hp[ch] == b.V[2].hp[ch] == 96


def test_json_round_trip(tmp_path):
    pg = build_perfgraph(load_graph(GOLDEN / "residual_add.json"), "train")
    p = tmp_path / "pg.json"
    p.write_text(pg.to_json())
    back = load_perfgraph(p)
    assert back.u == pg.u and back.V == pg.V and back.E == pg.E
    np.testing.assert_array_equal(back.node_x, pg.node_x)


def test_normalize_identity_and_zero():
    pg = build_perfgraph(load_graph(GOLDEN / "conv_relu.json"))
    ident = NormStats.identity()
    once = normalize(pg, ident)
    twice = normalize(once, ident)
    np.testing.assert_array_equal(once.node_x, twice.node_x)
    col = NODE_FIELDS.index("prop_flops")
    np.testing.assert_array_equal(once.node_x[:, col], pg.node_x[:, col])
    # log1p(0) = 0 for a zero magnitude feature (unused hp slot)
    assert once.node_x[0, NODE_FIELDS.index("unused")] == 0.0
    col = NODE_FIELDS.index("flops")
    assert once.node_x[0, col] == pytest.approx(np.log1p(3_538_944))


def test_fit_norm_stats_matches_two_pass():
    pgs = [build_perfgraph(g) for g in graphs(8)]
    stats = fit_norm_stats(pgs)
    # brute-force: collect every node's prop_mac, then mean and population std
    col = NODE_FIELDS.index("prop_mac")
    vals = [v.prop_mac for pg in pgs for v in pg.V]
    mean = sum(vals) / len(vals)
    std = (sum((x - mean) ** 2 for x in vals) / len(vals)) ** 0.5
    assert stats.node_shift[col] == pytest.approx(mean, rel=1e-12)
    assert stats.node_scale[col] == pytest.approx(std, rel=1e-12)
    n = normalize(pgs[0], stats)
    assert n.node_x[0, col] == pytest.approx((pgs[0].V[0].prop_mac - mean) / std, rel=1e-10)
    gcol = GLOBAL_FIELDS.index("num_nodes")
    logs = [np.log1p(pg.u.num_nodes) for pg in pgs]
    assert stats.global_shift[gcol] == pytest.approx(np.mean(logs), rel=1e-12)


def test_normalize_requires_stats():
    pg = build_perfgraph(load_graph(GOLDEN / "conv_relu.json"))
    with pytest.raises(NotFitted):
        normalize(pg, None)
