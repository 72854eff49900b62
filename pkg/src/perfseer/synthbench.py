"""Random CNN-style graphs labeled by an analytic roofline device model.

Stands in for hardware measurement: the labels are a deterministic
function of per-operator FLOPs, bytes and tensor sizes, so a model that sees
those quantities can in principle learn them.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .featurize import PHASES, op_flops, op_mac_bytes, weight_elements
from .graph_ir import CompGraph, OpKind, OpNode, build_graph, load_graph, numel

FAMILIES = ("chain-vgg", "residual", "dense-block", "bottleneck-mix")
TRAIN_TIME_FACTOR = 3.0  # forward + backward ~ 3x forward
TRAIN_ACTIVATION_FACTOR = 2.0
LABEL_FIELDS = ("time_s", "mem_bytes", "util_frac")


@dataclass(frozen=True)
class CostOracleSpec:
    """Roofline device constants (defaults loosely follow a desktop GPU)."""

    peak_flops: float = 35.6e12
    mem_bandwidth: float = 936e9
    per_op_overhead: float = 4e-6
    mem_base: float = 256 * 2**20
    util_saturation: float = 0.95

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"oracle constant {k} must be positive, got {v}")


@dataclass(frozen=True)
class ArchSpec:
    families: tuple = FAMILIES
    depth_range: tuple = (2, 5)
    channel_range: tuple = (8, 128)
    batch_sizes: tuple = (1, 2, 4, 8, 16, 32, 64)
    resolutions: tuple = (32, 64, 96, 128, 224)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown or not self.families:
            raise ValueError(f"unknown architecture families {sorted(unknown)}")
        lo, hi = self.depth_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad depth range {self.depth_range}")
        lo, hi = self.channel_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad channel range {self.channel_range}")

    @classmethod
    def from_dict(cls, d) -> "ArchSpec":
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        if isinstance(fields.get("families"), str):
            fields["families"] = (fields["families"],)
        return cls(**fields)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class _Builder:
    def __init__(self):
        self.nodes: list = []
        self.pairs: list = []

    def add(self, kind: OpKind, inputs: Sequence[int] = (), **hp) -> int:
        nid = len(self.nodes)
        self.nodes.append(OpNode(nid, kind, hp))
        self.pairs.extend((i, nid) for i in inputs)
        return nid

    def conv(self, x, cout, k=3, stride=1, groups=1, bn=True, relu=True):
        inputs = [x] if x is not None else []
        y = self.add(OpKind.CONV2D, inputs, kernel_h=k, kernel_w=k, stride=stride, padding=k // 2,
                     out_channels=cout, groups=groups)
        if bn:
            y = self.add(OpKind.BATCHNORM, [y])
        if relu:
            y = self.add(OpKind.RELU, [y])
        return y


def _channels(rng, lo, hi) -> int:
    # log-uniform, rounded to a multiple of 8 when the range allows it
    c = int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))
    if hi >= 8:
        c = max(8, 8 * round(c / 8))
    return int(min(max(c, lo), max(hi, lo)))


def _spatial_ok(h: int) -> bool:
    return h >= 4


def _build(family: str, rng: np.random.Generator, spec: ArchSpec, res: int):
    b = _Builder()
    depth = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
    lo, hi = spec.channel_range
    c = _channels(rng, lo, hi)
    h = res
    x = b.conv(None, c, k=3, stride=2 if res >= 96 else 1)
    h = h // 2 if res >= 96 else h
    for stage in range(depth):
        cout = min(int(c * rng.choice([1, 2])), max(hi * 2, lo))
        downsample = _spatial_ok(h // 2) and (stage > 0 or rng.random() < 0.5)
        if family == "chain-vgg":
            for _ in range(int(rng.integers(1, 3))):
                x = b.conv(x, cout)
            if downsample:
                x = b.add(OpKind.MAXPOOL, [x], kernel_h=2, kernel_w=2, stride=2, padding=0)
        elif family == "residual":
            stride = 2 if downsample else 1
            y = b.conv(x, cout, stride=stride)
            y = b.conv(y, cout, relu=False)
            shortcut = x if (stride == 1 and cout == c) else b.conv(x, cout, k=1, stride=stride, relu=False)
            x = b.add(OpKind.RELU, [b.add(OpKind.ADD, [y, shortcut])])
        elif family == "dense-block":
            growth = max(lo, cout // 4)
            feats = [x]
            for _ in range(int(rng.integers(2, 4))):
                inp = feats[0] if len(feats) == 1 else b.add(OpKind.CONCAT, feats)
                feats.append(b.conv(inp, growth))
            x = b.add(OpKind.CONCAT, feats)
            cout = min(c + growth * (len(feats) - 1), max(hi * 2, lo))
            x = b.conv(x, cout, k=1)
            if downsample:
                x = b.add(OpKind.AVGPOOL, [x], kernel_h=2, kernel_w=2, stride=2, padding=0)
        else:  # bottleneck-mix
            expand = c * int(rng.choice([2, 4, 6]))
            stride = 2 if downsample else 1
            y = b.conv(x, expand, k=1)
            y = b.conv(y, expand, k=3, stride=stride, groups=expand)
            y = b.conv(y, cout, k=1, relu=False)
            x = b.add(OpKind.ADD, [y, x]) if (stride == 1 and cout == c) else y
        if downsample:
            h //= 2
        c = cout
    x = b.add(OpKind.GLOBALAVGPOOL, [x])
    x = b.add(OpKind.FLATTEN, [x])
    x = b.add(OpKind.GEMM, [x], out_features=spec.num_classes, has_bias=1)
    b.add(OpKind.SOFTMAX, [x])
    return b


def gen_graph(spec: ArchSpec, seed, family: str | None = None) -> CompGraph:
    """Deterministic random graph for ``(spec, seed)``; ``seed`` may be an int or sequence."""
    rng = np.random.default_rng(seed)
    family = family or spec.families[int(rng.integers(len(spec.families)))]
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    batch = int(rng.choice(spec.batch_sizes))
    res = int(rng.choice(spec.resolutions))
    b = _build(family, rng, spec, res)
    return build_graph(b.nodes, b.pairs, (batch, 3, res, res), batch)


def peak_activation_bytes(g: CompGraph) -> int:
    """Peak bytes of simultaneously live activations during a topological execution.

    The model input stays live until every source node has run; a tensor is
    freed after its last consumer. Outputs of sink nodes are held to the end.
    """
    dt = g.dtype_bytes
    remaining = {n.id: len(g.successors(n.id)) for n in g.nodes}
    sources_left = len(g.sources())
    live = numel(g.input_shape) * dt
    peak = live
    for nid in g.topo_order():
        out = numel(g.out_shapes[nid]) * dt
        peak = max(peak, live + out)
        live += out
        preds = g.predecessors(nid)
        if not preds:
            sources_left -= 1
            if sources_left == 0:
                live -= numel(g.input_shape) * dt
        for p in set(preds):
            remaining[p] -= preds.count(p)
            if remaining[p] == 0:
                live -= numel(g.out_shapes[p]) * dt
    return peak


def label(g: CompGraph, oracle: CostOracleSpec = CostOracleSpec(), phase: str = "infer") -> tuple:
    """``(time_s, mem_bytes, util_frac)`` under the roofline-with-overhead model."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    time = 0.0
    total_flops = 0
    weight_bytes = 0
    for n in sorted(g.nodes, key=lambda n: n.id):
        ins, out, ws = g.in_shapes(n.id), g.out_shapes[n.id], g.weight_shapes[n.id]
        f = op_flops(n, ins, out)
        m = op_mac_bytes(n, ins, out, g.dtype_bytes, ws)
        time += max(f / oracle.peak_flops, m / oracle.mem_bandwidth)
        total_flops += f
        weight_bytes += weight_elements(n, ws) * g.dtype_bytes
    time += len(g.nodes) * oracle.per_op_overhead
    act = float(peak_activation_bytes(g))
    if phase == "train":
        time *= TRAIN_TIME_FACTOR
        act *= TRAIN_ACTIVATION_FACTOR
    mem = oracle.mem_base + weight_bytes + act
    util = min(max(total_flops / (time * oracle.peak_flops), 0.0), oracle.util_saturation)
    return time, mem, util


@dataclass
class Sample:
    graph_id: str
    graph: CompGraph
    labels: dict = field(default_factory=dict)  # phase -> (time, mem, util)


def gen_dataset(spec: ArchSpec, n: int, oracle: CostOracleSpec = CostOracleSpec()) -> list:
    samples = []
    for i in range(n):
        g = gen_graph(spec, [spec.seed, i])
        samples.append(Sample(f"g{i:05d}", g, {ph: label(g, oracle, ph) for ph in PHASES}))
    return samples


def write_dataset(samples: Sequence[Sample], out_dir, spec: ArchSpec | None = None,
                  oracle: CostOracleSpec | None = None) -> Path:
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    for s in samples:
        (out / "graphs" / f"{s.graph_id}.json").write_text(s.graph.to_json())
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("graph_id", "phase", *LABEL_FIELDS))
        for s in samples:
            for ph in PHASES:
                t, m, u = s.labels[ph]
                w.writerow((s.graph_id, ph, repr(t), repr(m), repr(u)))
    meta = {"num_graphs": len(samples)}
    if spec is not None:
        meta["arch"] = spec.to_dict()
    if oracle is not None:
        meta["oracle"] = asdict(oracle)
    (out / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def read_dataset(ds_dir) -> list:
    ds = Path(ds_dir)
    labels: dict = {}
    with open(ds / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            labels.setdefault(row["graph_id"], {})[row["phase"]] = tuple(float(row[k]) for k in LABEL_FIELDS)
    return [Sample(gid, load_graph(ds / "graphs" / f"{gid}.json"), labels[gid]) for gid in sorted(labels)]
