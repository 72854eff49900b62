"""CompGraph -> PerfGraph feature extraction and feature scaling.

Per-node costs are computed in integer arithmetic; floats appear only in
ratios (arithmetic intensity, proportions, density, means).
"""
from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NotFitted, WidthMismatch
from .graph_ir import POOLS, CompGraph, OpKind, OpNode, Shape, as_nchw, numel

PHASES = ("infer", "train")

HP_SLOTS = ("kernel_h", "kernel_w", "stride", "padding", "groups", "in_ch", "out_ch",
            "has_bias", "pool_flag", "gemm_in", "gemm_out", "unused")
NODE_FIELDS = HP_SLOTS + ("flops", "mac_bytes", "weight_bytes", "arith_intensity",
                          "prop_flops", "prop_mac", "prop_weight")
EDGE_FIELDS = ("size", "n", "c", "h", "w")
GLOBAL_FIELDS = ("num_nodes", "num_edges", "density",
                 "flops_total", "flops_mean", "flops_median", "flops_max",
                 "mac_total", "mac_mean", "mac_median", "mac_max",
                 "weight_total", "weight_mean", "weight_median", "weight_max",
                 "mean_edge_size", "arith_intensity", "batch_size", "phase")

# features scaled with log1p before standardization; the rest are standardized as-is
_BOUNDED = {"arith_intensity", "prop_flops", "prop_mac", "prop_weight", "density", "phase"}
NODE_LOG_MASK = np.array([f not in _BOUNDED for f in NODE_FIELDS])
EDGE_LOG_MASK = np.ones(len(EDGE_FIELDS), dtype=bool)
GLOBAL_LOG_MASK = np.array([f not in _BOUNDED for f in GLOBAL_FIELDS])


def weight_elements(node: OpNode, weight_shape: Shape) -> int:
    n = numel(weight_shape) if weight_shape else 0
    if node.kind in (OpKind.CONV2D, OpKind.GEMM) and node.hp("has_bias"):
        n += weight_shape[0]
    return n


def op_flops(node: OpNode, in_shapes: Sequence[Shape], out_shape: Shape) -> int:
    """FLOPs of one operator; a multiply-accumulate counts as 2."""
    k = node.kind
    out = numel(out_shape)
    if k == OpKind.CONV2D:
        n, cout, ho, wo = out_shape
        cin = in_shapes[0][1]
        return 2 * int(node.hp("kernel_h")) * int(node.hp("kernel_w")) * (cin // int(node.hp("groups"))) \
            * cout * ho * wo * n
    if k == OpKind.GEMM:
        x = in_shapes[0]
        return 2 * x[0] * numel(x[1:]) * out_shape[1]
    if k in POOLS:
        return int(node.hp("kernel_h")) * int(node.hp("kernel_w")) * out
    if k == OpKind.GLOBALAVGPOOL:
        _, _, h, w = in_shapes[0]
        return h * w * out
    if k == OpKind.BATCHNORM:
        return 2 * out
    if k in (OpKind.RELU, OpKind.SOFTMAX, OpKind.ADD):
        return out
    return 0  # Flatten, Concat: pure data movement


def op_mac_bytes(node: OpNode, in_shapes: Sequence[Shape], out_shape: Shape, dtype_bytes: int = 4,
                 weight_shape: Shape = ()) -> int:
    """Bytes of every input, weight and output tensor touched by the operator."""
    elems = sum(numel(s) for s in in_shapes) + weight_elements(node, weight_shape) + numel(out_shape)
    return elems * dtype_bytes


def hp_vector(node: OpNode, in_shapes: Sequence[Shape], out_shape: Shape) -> tuple:
    slots = dict.fromkeys(HP_SLOTS, 0)
    in_shape = in_shapes[0]
    k = node.kind
    if k == OpKind.CONV2D:
        for name in ("kernel_h", "kernel_w", "stride", "padding", "groups", "has_bias"):
            slots[name] = node.hp(name)
        slots["in_ch"], slots["out_ch"] = in_shape[1], out_shape[1]
    elif k in POOLS:
        for name in ("kernel_h", "kernel_w", "stride", "padding"):
            slots[name] = node.hp(name)
        slots["in_ch"] = slots["out_ch"] = in_shape[1]
        slots["pool_flag"] = 1
    elif k == OpKind.GLOBALAVGPOOL:
        slots["kernel_h"], slots["kernel_w"] = in_shape[2], in_shape[3]
        slots["stride"] = 1
        slots["in_ch"] = slots["out_ch"] = in_shape[1]
        slots["pool_flag"] = 1
    elif k == OpKind.GEMM:
        slots["gemm_in"], slots["gemm_out"] = numel(in_shape[1:]), out_shape[1]
        slots["has_bias"] = node.hp("has_bias")
    elif k == OpKind.BATCHNORM:
        slots["in_ch"] = slots["out_ch"] = in_shape[1]
    elif k == OpKind.CONCAT:
        # summed so the slot does not depend on predecessor order
        slots["in_ch"], slots["out_ch"] = sum(s[1] for s in in_shapes), out_shape[1]
    return tuple(slots[s] for s in HP_SLOTS)


@dataclass(frozen=True)
class NodeFeatures:
    hp: tuple
    flops: int
    mac_bytes: int
    weight_bytes: int
    arith_intensity: float
    prop_flops: float
    prop_mac: float
    prop_weight: float

    def vector(self) -> list:
        return [*self.hp, self.flops, self.mac_bytes, self.weight_bytes, self.arith_intensity,
                self.prop_flops, self.prop_mac, self.prop_weight]


@dataclass(frozen=True)
class EdgeFeatures:
    size: int
    shape: tuple

    def vector(self) -> list:
        return [self.size, *self.shape]


@dataclass(frozen=True)
class GlobalFeatures:
    num_nodes: int
    num_edges: int
    density: float
    flops_stats: tuple
    mac_stats: tuple
    weight_stats: tuple
    mean_edge_size: float
    arith_intensity: float
    batch_size: int
    phase: int

    def vector(self) -> list:
        return [self.num_nodes, self.num_edges, self.density, *self.flops_stats, *self.mac_stats,
                *self.weight_stats, self.mean_edge_size, self.arith_intensity, self.batch_size, self.phase]


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension (shift, scale) for node, edge and global features."""

    node_shift: np.ndarray
    node_scale: np.ndarray
    edge_shift: np.ndarray
    edge_scale: np.ndarray
    global_shift: np.ndarray
    global_scale: np.ndarray

    def to_dict(self) -> dict:
        return {k: [float(x) for x in v] for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.__dataclass_fields__})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def identity(cls) -> "NormStats":
        z = np.zeros
        o = np.ones
        return cls(z(len(NODE_FIELDS)), o(len(NODE_FIELDS)), z(len(EDGE_FIELDS)), o(len(EDGE_FIELDS)),
                   z(len(GLOBAL_FIELDS)), o(len(GLOBAL_FIELDS)))


@dataclass(frozen=True, eq=False)
class PerfGraph:
    """Global, node and edge features over the operator topology.

    ``node_x``/``edge_x``/``global_x`` hold the model-facing arrays: raw
    features until :func:`normalize` has been applied, scaled afterwards.
    Node row ``i`` corresponds to ``node_ids[i]`` (ascending id order).
    """

    u: GlobalFeatures
    V: tuple
    E: tuple  # (EdgeFeatures, source_index, target_index)
    node_ids: tuple
    node_x: np.ndarray = field(repr=False)
    edge_x: np.ndarray = field(repr=False)
    global_x: np.ndarray = field(repr=False)
    normalization: NormStats | None = field(default=None, repr=False)

    @property
    def src(self) -> np.ndarray:
        return np.array([s for _, s, _ in self.E], dtype=np.int64)

    @property
    def dst(self) -> np.ndarray:
        return np.array([t for _, _, t in self.E], dtype=np.int64)

    @property
    def phase(self) -> str:
        return PHASES[self.u.phase]

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "u": asdict(self.u),
            "V": [asdict(v) for v in self.V],
            "E": [{"features": asdict(e), "source": s, "target": t} for e, s, t in self.E],
            "node_ids": list(self.node_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _stats(values: list) -> tuple:
    total = sum(values)
    return (total, total / len(values), statistics.median(values), max(values))


def _raw_arrays(u: GlobalFeatures, V, E):
    node_x = np.array([v.vector() for v in V], dtype=np.float64).reshape(len(V), len(NODE_FIELDS))
    edge_x = np.array([e.vector() for e, _, _ in E], dtype=np.float64).reshape(len(E), len(EDGE_FIELDS))
    return node_x, edge_x, np.array(u.vector(), dtype=np.float64)


def assemble(u: GlobalFeatures, V, E, node_ids) -> PerfGraph:
    node_x, edge_x, global_x = _raw_arrays(u, V, E)
    return PerfGraph(u=u, V=tuple(V), E=tuple(E), node_ids=tuple(node_ids),
                     node_x=node_x, edge_x=edge_x, global_x=global_x)


def build_perfgraph(g: CompGraph, phase: str = "infer") -> PerfGraph:
    """Extract node, edge and global features. Node categories are not encoded."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    ids = sorted(n.id for n in g.nodes)
    index = {nid: i for i, nid in enumerate(ids)}
    flops, macs, weights, hps = [], [], [], []
    for nid in ids:
        node = g.node(nid)
        ins, out, ws = g.in_shapes(nid), g.out_shapes[nid], g.weight_shapes[nid]
        flops.append(op_flops(node, ins, out))
        macs.append(op_mac_bytes(node, ins, out, g.dtype_bytes, ws))
        weights.append(weight_elements(node, ws) * g.dtype_bytes)
        hps.append(hp_vector(node, ins, out))
    tot_f, tot_m, tot_w = sum(flops), sum(macs), sum(weights)
    V = [NodeFeatures(hp=hp, flops=f, mac_bytes=m, weight_bytes=w,
                      arith_intensity=f / m if m else 0.0,
                      prop_flops=f / tot_f if tot_f else 0.0,
                      prop_mac=m / tot_m if tot_m else 0.0,
                      prop_weight=w / tot_w if tot_w else 0.0)
         for hp, f, m, w in zip(hps, flops, macs, weights)]
    E = []
    for e in g.edges:
        shp = as_nchw(e.shape)
        E.append((EdgeFeatures(size=numel(shp), shape=shp), index[e.src], index[e.dst]))
    nv, ne = len(ids), len(E)
    u = GlobalFeatures(
        num_nodes=nv, num_edges=ne,
        density=ne / (nv * (nv - 1)) if nv > 1 else 0.0,
        flops_stats=_stats(flops), mac_stats=_stats(macs), weight_stats=_stats(weights),
        mean_edge_size=sum(e.size for e, _, _ in E) / ne if ne else 0.0,
        arith_intensity=tot_f / tot_m if tot_m else 0.0,
        batch_size=g.batch_size, phase=PHASES.index(phase),
    )
    return assemble(u, V, E, ids)


def perfgraph_from_dict(d) -> PerfGraph:
    gu = d["u"]
    u = GlobalFeatures(**{**gu, "flops_stats": tuple(gu["flops_stats"]), "mac_stats": tuple(gu["mac_stats"]),
                          "weight_stats": tuple(gu["weight_stats"])})
    V = [NodeFeatures(**{**v, "hp": tuple(v["hp"])}) for v in d["V"]]
    E = [(EdgeFeatures(size=e["features"]["size"], shape=tuple(e["features"]["shape"])),
          int(e["source"]), int(e["target"])) for e in d["E"]]
    return assemble(u, V, E, d["node_ids"])


def load_perfgraph(path) -> PerfGraph:
    return perfgraph_from_dict(json.loads(Path(path).read_text()))


def _scale_input(x: np.ndarray, log_mask: np.ndarray) -> np.ndarray:
    return np.where(log_mask, np.log1p(np.where(log_mask, x, 0.0)), x)


def _col_stats(rows: np.ndarray):
    # two-pass mean / population std in a fixed order
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1]), np.ones(rows.shape[1])
    mean = rows.sum(axis=0) / rows.shape[0]
    std = np.sqrt(((rows - mean) ** 2).sum(axis=0) / rows.shape[0])
    return mean, np.where(std > 1e-12, std, 1.0)


def fit_norm_stats(pgs: Sequence[PerfGraph]) -> NormStats:
    """Statistics over a training split; every node and edge counts once."""
    nodes = _scale_input(np.concatenate([_raw_arrays(p.u, p.V, p.E)[0] for p in pgs]), NODE_LOG_MASK)
    edges = _scale_input(np.concatenate([_raw_arrays(p.u, p.V, p.E)[1] for p in pgs]), EDGE_LOG_MASK)
    glob = _scale_input(np.stack([np.array(p.u.vector(), dtype=np.float64) for p in pgs]), GLOBAL_LOG_MASK)
    ns, nc = _col_stats(nodes)
    es, ec = _col_stats(edges)
    gs, gc = _col_stats(glob)
    return NormStats(ns, nc, es, ec, gs, gc)


def normalize(pg: PerfGraph, stats: NormStats | None) -> PerfGraph:
    """Scale the raw features of ``pg``.

    Magnitude features map to ``(log1p(x) - shift) / scale``; bounded ones
    (proportions, density, intensity, phase) to ``(x - shift) / scale``.
    Always starts from the raw feature records, so re-applying is safe.
    """
    if stats is None:
        raise NotFitted("normalization statistics are missing")
    if len(stats.node_shift) != len(NODE_FIELDS) or len(stats.edge_shift) != len(EDGE_FIELDS) \
            or len(stats.global_shift) != len(GLOBAL_FIELDS):
        raise WidthMismatch("normalization statistics do not match the feature layout")
    if np.any(stats.node_scale <= 0) or np.any(stats.edge_scale <= 0) or np.any(stats.global_scale <= 0):
        raise ValueError("normalization scales must be positive")
    node_x, edge_x, global_x = _raw_arrays(pg.u, pg.V, pg.E)
    return replace(
        pg,
        node_x=(_scale_input(node_x, NODE_LOG_MASK) - stats.node_shift) / stats.node_scale,
        edge_x=(_scale_input(edge_x, EDGE_LOG_MASK) - stats.edge_shift) / stats.edge_scale,
        global_x=(_scale_input(global_x, GLOBAL_LOG_MASK) - stats.global_shift) / stats.global_scale,
        normalization=stats,
    )


def save_norm_stats(stats: NormStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))


def load_norm_stats(path) -> NormStats:
    return NormStats.from_dict(json.loads(Path(path).read_text()))
