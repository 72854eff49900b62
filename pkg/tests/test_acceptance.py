"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (echoed in the terminal summary).
Criteria 5-7 train H=64 models on a 2,000-graph oracle-labelled dataset;
runs are cached so the criteria that share a configuration share the run.
"""
import csv
import json
import math
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from oracles.finite_diff import central_diff, max_rel_err
from perfseer.cli import main
from perfseer.featurize import build_perfgraph, fit_norm_stats, normalize
from perfseer.graph_ir import from_dict, load_graph
from perfseer.numkernel import Tape, backward
from perfseer.pcgrad import project_conflicts
from perfseer.seernet import GraphBatch, SeerNet, SeerNetConfig
from perfseer.synthbench import ArchSpec, Sample, gen_dataset, gen_graph
from perfseer.trainer import FittedModel, TrainConfig, evaluate, split, train

GOLDEN = Path(__file__).parent / "golden"

DATA_SEED = 1  # architecture stream for the 2,000-graph dataset
SPLIT_SEED = 0
HIDDEN = 64
LEARN_EPOCHS = 200  # criterion 5 budget
COMPARE_EPOCHS = 200  # criteria 6 and 7
SEEDS = (0, 1, 2)
MULTI = ("infer_time", "infer_mem", "infer_util")


@lru_cache(maxsize=None)
def dataset():
    return split(gen_dataset(ArchSpec(seed=DATA_SEED), 2000), (2, 1, 1), SPLIT_SEED)


@lru_cache(maxsize=None)
def run(targets=("infer_time",), seed=0, full=True, pcgrad=False, epochs=COMPARE_EPOCHS):
    """Train once per configuration; returns ``(per-target test MAPE, mean test MAPE, seconds)``."""
    tr, va, te = dataset()
    cfg = TrainConfig(hidden=HIDDEN, head_hidden=HIDDEN, targets=targets, seed=seed, synmm=full, gnpb=full,
                      use_pcgrad=pcgrad, max_epochs=epochs)
    start = time.perf_counter()
    fitted, _ = train(cfg, tr, va)
    elapsed = time.perf_counter() - start
    report, _ = evaluate(fitted, te)
    return {t: m.mape for t, m in report.per_target.items()}, report.mean["mape"], elapsed


def relabel(g, rng):
    raw = g.to_dict()
    ids = [n["id"] for n in raw["nodes"]]
    new = dict(zip(ids, (int(i) for i in rng.permutation(len(ids)) + 100)))
    nodes = [{**n, "id": new[n["id"]]} for n in raw["nodes"]]
    raw["nodes"] = [nodes[i] for i in rng.permutation(len(nodes))]
    edges = [[new[s], new[d]] for s, d in raw["edges"]]
    raw["edges"] = [edges[i] for i in rng.permutation(len(edges))]
    return from_dict(raw)


def test_01_feature_extraction_golden(verdict):
    expected = json.loads((GOLDEN / "expected.json").read_text())
    names = [k for k in expected if not k.startswith("_")]
    start = time.perf_counter()
    mismatches = []
    for name in names:
        exp = expected[name]
        pg = build_perfgraph(load_graph(GOLDEN / f"{name}.json"))
        got = {"flops": [v.flops for v in pg.V], "mac_bytes": [v.mac_bytes for v in pg.V],
               "weight_bytes": [v.weight_bytes for v in pg.V]}
        mismatches += [f"{name}.{k}" for k in got if got[k] != exp[k]]
        if (pg.u.flops_stats[0], pg.u.mac_stats[0], pg.u.num_edges) != \
                (sum(exp["flops"]), sum(exp["mac_bytes"]), exp["num_edges"]):
            mismatches.append(f"{name}.globals")
        if pg.u.mean_edge_size != exp["mean_edge_size"]:
            mismatches.append(f"{name}.mean_edge_size")
    conv = build_perfgraph(load_graph(GOLDEN / "conv_relu.json")).V[0]
    elapsed = time.perf_counter() - start
    ok = (len(names) >= 5 and not mismatches and (conv.flops, conv.mac_bytes) == (3_538_944, 281_344)
          and elapsed < 1.0)
    verdict(1, ok, f"{len(names)} golden graphs, mismatches={mismatches or 'none'}, "
                   f"conv flops={conv.flops} mac={conv.mac_bytes}, {elapsed:.3f}s (<1s)")


def test_02_gradient_integrity(verdict):
    start = time.perf_counter()
    g = from_dict({
        "input_shape": [4, 3, 16, 16],
        "nodes": [{"id": 0, "kind": "Conv2d",
                   "hyperparams": {"kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1, "out_channels": 8}},
                  {"id": 1, "kind": "ReLU"},
                  {"id": 2, "kind": "MaxPool", "hyperparams": {"kernel_h": 2, "kernel_w": 2, "stride": 2, "padding": 0}}],
        "edges": [[0, 1], [1, 2]]})
    pgs = [build_perfgraph(g, "infer"), build_perfgraph(g, "train")]
    stats = fit_norm_stats(pgs)
    batch = GraphBatch.from_graphs([normalize(p, stats) for p in pgs], "float64")
    model = SeerNet(SeerNetConfig(hidden=8, head_hidden=8, dtype="float64", seed=1))
    target = np.array([[0.5], [-0.25]])

    def loss():
        t = Tape()
        return t, t.masked_mse(model.forward(t, batch)[0], target)

    tape, out = loss()
    grads = backward(tape, output=out).params
    worst, n = 0.0, 0
    for p in model.params():
        fd = central_diff(lambda: float(loss()[1].value), p.value, step=1e-5)
        worst = max(worst, max_rel_err(grads[p.name], fd, floor=1e-7))
        n += p.value.size
    elapsed = time.perf_counter() - start
    verdict(2, worst < 1e-4 and elapsed < 10.0,
            f"{n} parameters, max relative error {worst:.2e} (<1e-4), {elapsed:.1f}s (<10s)")


def test_03_permutation_invariance(verdict):
    rng = np.random.default_rng(3)
    spec = ArchSpec(seed=33)
    train_samples = gen_dataset(spec, 64)
    fitted, _ = train(TrainConfig(hidden=HIDDEN, head_hidden=HIDDEN, max_epochs=2, batch_size=16),
                      train_samples[:48], train_samples[48:])
    worst = 0.0
    for i in range(100):
        g = gen_graph(spec, [99, i])
        base = fitted.predict_physical([fitted.prepare(build_perfgraph(g))])[0, 0]
        perms = [fitted.prepare(build_perfgraph(relabel(g, rng))) for _ in range(5)]
        preds = fitted.predict_physical(perms)[:, 0]
        worst = max(worst, float(np.max(np.abs(preds - base) / abs(base))))
    verdict(3, worst < 1e-5, f"100 graphs x 5 permutations, max relative deviation {worst:.2e} (<1e-5)")


def test_04_pcgrad_properties(verdict):
    rng = np.random.default_rng(4)
    total, worked = project_conflicts([np.array([1.0, 0.0]), np.array([-1.0, 1.0])], 0, return_projected=True)
    worked_ok = total.tolist() == [0.5, 1.5]
    free_ok, cross_min, norm_ok, n_conflict = True, math.inf, True, 0
    for _ in range(1000):
        d = int(rng.integers(2, 40))
        g1, g2 = rng.normal(size=d), rng.normal(size=d)
        total, (p1, p2) = project_conflicts([g1, g2], rng, return_projected=True)
        if g1 @ g2 >= 0:
            free_ok &= np.array_equal(p1, g1) and np.array_equal(p2, g2) and np.array_equal(total, g1 + g2)
        else:
            n_conflict += 1
            cross_min = min(cross_min, float(p1 @ g2), float(p2 @ g1))
            norm_ok &= bool(np.linalg.norm(p1) <= np.linalg.norm(g1) and np.linalg.norm(p2) <= np.linalg.norm(g2))
    ok = worked_ok and free_ok and cross_min >= -1e-9 and norm_ok and 0 < n_conflict < 1000
    verdict(4, ok, f"worked example -> {total.tolist() if not worked_ok else [0.5, 1.5]}, "
                   f"{1000 - n_conflict} conflict-free unchanged={free_ok}, {n_conflict} conflicting: "
                   f"min cross dot {cross_min:.1e} (>=-1e-9), norms non-increasing={norm_ok}")


@pytest.mark.slow
def test_05_single_metric_learnability(verdict):
    per, mape, elapsed = run(seed=0, epochs=LEARN_EPOCHS)
    verdict(5, mape <= 10.0 and elapsed < 30 * 60,
            f"2000 graphs, H={HIDDEN}, {LEARN_EPOCHS} epochs: test infer_time MAPE {mape:.2f}% (<=10%), "
            f"{elapsed / 60:.1f} min (<30 min)")


@pytest.mark.slow
def test_06_component_ablation(verdict):
    full = [run(seed=s)[1] for s in SEEDS]
    ablated = [run(seed=s, full=False)[1] for s in SEEDS]
    verdict(6, np.mean(full) <= np.mean(ablated),
            f"mean test MAPE over seeds {list(SEEDS)}: full {np.mean(full):.2f}% "
            f"({', '.join(f'{m:.2f}' for m in full)}) <= mean-readout/no-global-node {np.mean(ablated):.2f}% "
            f"({', '.join(f'{m:.2f}' for m in ablated)})")


@pytest.mark.slow
def test_07_multi_metric(verdict):
    singles = [np.mean([run((t,), seed=s)[1] for t in MULTI]) for s in SEEDS]
    with_pc = [run(MULTI, seed=s, pcgrad=True)[1] for s in SEEDS]
    without_pc = [run(MULTI, seed=s, pcgrad=False)[1] for s in SEEDS]
    ratio = np.mean(with_pc) / np.mean(singles)
    ok = ratio <= 1.6 and np.mean(with_pc) < np.mean(without_pc)
    verdict(7, ok, f"mean MAPE over seeds: independent {np.mean(singles):.2f}%, multi+PCGrad {np.mean(with_pc):.2f}% "
                   f"(ratio {ratio:.2f} <= 1.6), multi without PCGrad {np.mean(without_pc):.2f}% (must be worse)")


def test_08_schedule_conformance(verdict, tmp_path):
    samples = gen_dataset(ArchSpec(seed=8), 16)
    losses = iter(range(1000))
    _, history = train(TrainConfig(hidden=8, head_hidden=8, max_epochs=60, batch_size=16), samples[:8], samples[8:],
                       validate=lambda fitted: 1.0 + next(losses))
    history.write_csv(tmp_path / "history.csv")
    with open(tmp_path / "history.csv") as fh:
        lrs = [float(r["lr"]) for r in csv.DictReader(fh)]
    expected = [max(1e-3 * 0.5 ** ((e - 1) // 5), 1e-6) for e in range(1, 61)]
    first_floor = lrs.index(1e-6) + 1 if 1e-6 in lrs else None
    verdict(8, lrs == expected,
            f"LR trace from history.csv: epochs 1-5 {lrs[0]:g}, 6-10 {lrs[5]:g}, floor 1e-6 from epoch {first_floor}")


class _FixedPredictions(FittedModel):
    values = None

    def predict_physical(self, pgs):
        return self.values[: len(pgs)]


def test_09_metric_arithmetic(verdict):
    samples = gen_dataset(ArchSpec(seed=9), 8)
    fitted, _ = train(TrainConfig(hidden=8, head_hidden=8, max_epochs=1), samples[:6], samples[6:])
    stub = _FixedPredictions(fitted.model, fitted.norm_stats, fitted.target_stats, fitted.train_config)
    stub.values = np.array([[110.0], [95.0]])
    g = from_dict({"input_shape": [1, 4, 8, 8], "nodes": [{"id": 0, "kind": "ReLU"}], "edges": []})
    pair = [Sample(f"p{i}", g, {"infer": (100.0, 1.0, 0.5), "train": (300.0, 1.0, 0.5)}) for i in range(2)]
    report, _ = evaluate(stub, pair)
    m = report.per_target["infer_time"]
    rmspe = math.sqrt((0.01 + 0.0025) / 2) * 100
    verdict(9, abs(m.mape - 7.5) <= 1e-6 and abs(m.rmspe - rmspe) <= 1e-6,
            f"pairs (110,100),(95,100): MAPE {m.mape:.6f} (7.5), RMSPE {m.rmspe:.6f} ({rmspe:.6f})")


def test_10_determinism(verdict, tmp_path, monkeypatch):
    (tmp_path / "train.json").write_text(json.dumps({"hidden": 16, "head_hidden": 16, "max_epochs": 3,
                                                     "batch_size": 32, "targets": ["infer_time", "train_mem"]}))
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(["gen-dataset", "--n", "120", "--out", "ds", "--seed", "10", "-q"]) == 0
        assert main(["train", "--config", "../train.json", "--data", "ds", "--out", "run", "--seed", "10", "-q"]) == 0
        assert main(["evaluate", "--ckpt", "run/best.bin", "--out", "eval", "-q"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    compared = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.is_file())
    differ = [rel for rel in compared if (a / rel).read_bytes() != (b / rel).read_bytes()]
    ok = not differ and {"run/best.bin", "run/best.json", "run/report.json", "eval/report.json"} <= set(compared)
    verdict(10, ok, f"{len(compared)} artifacts compared (dataset, checkpoint, reports, predictions, figures), "
                    f"differing: {differ or 'none'}")
