"""Shape-annotated operator DAG and its canonical JSON form.

A graph file lists operator nodes and the ``[src, dst]`` pairs between them.
The model input (``input_shape``) feeds every node that has no incoming
edge; it is not itself an edge. Edge tensor shapes are always computed by
:func:`infer_shapes`, never read from disk.
"""
from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CyclicGraph, EmptyGraph, GraphError, ShapeMismatch, UnsupportedOp

Shape = tuple  # NCHW dims, or (N, F) for Gemm/Flatten outputs

FORMAT_VERSION = 1


class OpKind(str, enum.Enum):
    CONV2D = "Conv2d"
    GEMM = "Gemm"
    BATCHNORM = "BatchNorm"
    RELU = "ReLU"
    MAXPOOL = "MaxPool"
    AVGPOOL = "AvgPool"
    GLOBALAVGPOOL = "GlobalAvgPool"
    ADD = "Add"
    CONCAT = "Concat"
    FLATTEN = "Flatten"
    SOFTMAX = "Softmax"

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        if name == "Linear":
            return cls.GEMM
        try:
            return cls(name)
        except ValueError:
            raise UnsupportedOp(name) from None


ELEMENTWISE = {OpKind.RELU, OpKind.SOFTMAX, OpKind.ADD}
POOLS = {OpKind.MAXPOOL, OpKind.AVGPOOL}

REQUIRED_HP = {
    OpKind.CONV2D: ("kernel_h", "kernel_w", "stride", "padding", "out_channels"),
    OpKind.GEMM: ("out_features",),
    OpKind.MAXPOOL: ("kernel_h", "kernel_w", "stride", "padding"),
    OpKind.AVGPOOL: ("kernel_h", "kernel_w", "stride", "padding"),
}
OPTIONAL_HP = {
    OpKind.CONV2D: {"groups": 1, "has_bias": 0},
    OpKind.GEMM: {"has_bias": 0},
}


def numel(shape: Sequence[int]) -> int:
    return math.prod(shape)


def as_nchw(shape: Sequence[int]) -> tuple:
    """Pad rank-2 ``(N, F)`` shapes to ``(N, F, 1, 1)``."""
    shape = tuple(int(d) for d in shape)
    return shape + (1,) * (4 - len(shape))


@dataclass(frozen=True)
class OpNode:
    id: int
    kind: OpKind
    hyperparams: Mapping[str, float] = field(default_factory=dict)
    weight_shape: tuple | None = None

    def hp(self, name: str, default=0):
        return self.hyperparams.get(name, OPTIONAL_HP.get(self.kind, {}).get(name, default))


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    shape: Shape


@dataclass(frozen=True)
class CompGraph:
    """Validated operator DAG with inferred shapes.

    ``out_shapes[i]`` is the output tensor of node ``i``; every edge leaving
    ``i`` carries that shape. ``weight_shapes[i]`` is ``()`` for weightless
    operators.
    """

    nodes: tuple
    edges: tuple
    batch_size: int
    input_shape: Shape
    dtype_bytes: int = 4
    out_shapes: Mapping[int, Shape] = field(default_factory=dict, compare=False)
    weight_shapes: Mapping[int, Shape] = field(default_factory=dict, compare=False)

    def node(self, node_id: int) -> OpNode:
        return self._index[node_id]

    @cached_property
    def _index(self):
        return {n.id: n for n in self.nodes}

    @cached_property
    def _adjacency(self):
        preds: dict = {n.id: [] for n in self.nodes}
        succs: dict = {n.id: [] for n in self.nodes}
        for e in self.edges:
            preds[e.dst].append(e.src)
            succs[e.src].append(e.dst)
        return preds, succs

    def predecessors(self, node_id: int) -> list[int]:
        return list(self._adjacency[0][node_id])

    def successors(self, node_id: int) -> list[int]:
        return list(self._adjacency[1][node_id])

    def in_shapes(self, node_id: int) -> list[Shape]:
        preds = self.predecessors(node_id)
        if not preds:
            return [self.input_shape]
        return [self.out_shapes[p] for p in preds]

    def topo_order(self) -> list[int]:
        return topological_order([n.id for n in self.nodes], [(e.src, e.dst) for e in self.edges])

    def sources(self) -> list[int]:
        has_in = {e.dst for e in self.edges}
        return [n.id for n in self.nodes if n.id not in has_in]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "batch_size": self.batch_size,
            "dtype_bytes": self.dtype_bytes,
            "input_shape": list(self.input_shape),
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "hyperparams": dict(n.hyperparams),
                    "weight_shape": list(n.weight_shape) if n.weight_shape is not None else None,
                }
                for n in self.nodes
            ],
            "edges": [[e.src, e.dst] for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def with_batch_size(self, batch_size: int) -> "CompGraph":
        return from_dict({**self.to_dict(), "batch_size": batch_size,
                          "input_shape": [batch_size, *self.input_shape[1:]]})


def topological_order(node_ids: Iterable[int], pairs: Iterable[tuple]) -> list[int]:
    """Kahn's algorithm, always releasing the smallest ready id first."""
    node_ids = list(node_ids)
    indeg = {i: 0 for i in node_ids}
    succ: dict = {i: [] for i in node_ids}
    for s, d in pairs:
        succ[s].append(d)
        indeg[d] += 1
    ready = [i for i in node_ids if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for d in succ[i]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != len(node_ids):
        raise CyclicGraph("graph contains a cycle")
    return order


def _pool_out(h: int, k: int, s: int, p: int) -> int:
    out = (h + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeMismatch(f"window {k} (stride {s}, pad {p}) does not fit spatial size {h}")
    return out


def node_output_shape(node: OpNode, in_shapes: list[Shape]) -> Shape:
    """Shape arithmetic for one operator."""
    k = node.kind
    if k not in (OpKind.ADD, OpKind.CONCAT) and len(in_shapes) != 1:
        raise ShapeMismatch(f"node {node.id} ({k.value}) takes one input, got {len(in_shapes)}")
    x = in_shapes[0]
    if k == OpKind.CONV2D:
        if len(x) != 4:
            raise ShapeMismatch(f"Conv2d node {node.id} needs a rank-4 input, got {x}")
        n, c, h, w = x
        groups = int(node.hp("groups"))
        cout = int(node.hp("out_channels"))
        if c % groups or cout % groups:
            raise ShapeMismatch(f"channels {c}->{cout} not divisible by groups={groups}")
        s, p = int(node.hp("stride")), int(node.hp("padding"))
        return (n, cout, _pool_out(h, int(node.hp("kernel_h")), s, p), _pool_out(w, int(node.hp("kernel_w")), s, p))
    if k in POOLS:
        if len(x) != 4:
            raise ShapeMismatch(f"{k.value} node {node.id} needs a rank-4 input, got {x}")
        n, c, h, w = x
        s, p = int(node.hp("stride")), int(node.hp("padding"))
        return (n, c, _pool_out(h, int(node.hp("kernel_h")), s, p), _pool_out(w, int(node.hp("kernel_w")), s, p))
    if k == OpKind.GLOBALAVGPOOL:
        if len(x) != 4:
            raise ShapeMismatch(f"GlobalAvgPool node {node.id} needs a rank-4 input, got {x}")
        return (x[0], x[1], 1, 1)
    if k == OpKind.GEMM:
        return (x[0], int(node.hp("out_features")))
    if k == OpKind.FLATTEN:
        return (x[0], numel(x[1:]))
    if k in (OpKind.RELU, OpKind.SOFTMAX, OpKind.BATCHNORM):
        return tuple(x)
    if k == OpKind.ADD:
        if len(in_shapes) < 2:
            raise ShapeMismatch(f"Add node {node.id} needs at least two inputs")
        if any(tuple(s) != tuple(x) for s in in_shapes):
            raise ShapeMismatch(f"Add node {node.id} has mismatched inputs {in_shapes}")
        return tuple(x)
    if k == OpKind.CONCAT:
        if any(len(s) != len(x) or tuple(s[:1]) + tuple(s[2:]) != tuple(x[:1]) + tuple(x[2:]) for s in in_shapes):
            raise ShapeMismatch(f"Concat node {node.id} has incompatible inputs {in_shapes}")
        return (x[0], sum(s[1] for s in in_shapes), *x[2:])
    raise UnsupportedOp(k)


def expected_weight_shape(node: OpNode, in_shape: Shape) -> Shape:
    k = node.kind
    if k == OpKind.CONV2D:
        cin = in_shape[1]
        return (int(node.hp("out_channels")), cin // int(node.hp("groups")),
                int(node.hp("kernel_h")), int(node.hp("kernel_w")))
    if k == OpKind.GEMM:
        return (int(node.hp("out_features")), numel(in_shape[1:]))
    if k == OpKind.BATCHNORM:
        return (2, in_shape[1])  # folded scale and shift
    return ()


def infer_shapes(nodes: Sequence[OpNode], pairs: Sequence[tuple], input_shape: Shape):
    """Return ``(out_shapes, weight_shapes)`` keyed by node id.

    Inputs of multi-input nodes are taken in edge-list order.
    """
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 4 or min(input_shape) < 1:
        raise ShapeMismatch(f"input shape must be 4 positive dims, got {input_shape}")
    by_id = {n.id: n for n in nodes}
    order = topological_order(by_id, pairs)
    preds: dict = {i: [] for i in by_id}
    for s, d in pairs:
        preds[d].append(s)
    out_shapes: dict = {}
    weight_shapes: dict = {}
    for i in order:
        node = by_id[i]
        ins = [out_shapes[p] for p in preds[i]] or [input_shape]
        out_shapes[i] = node_output_shape(node, ins)
        weight_shapes[i] = expected_weight_shape(node, ins[0])
        if node.weight_shape is not None and tuple(node.weight_shape) != weight_shapes[i]:
            raise ShapeMismatch(
                f"node {i}: declared weight shape {tuple(node.weight_shape)} != inferred {weight_shapes[i]}")
    return out_shapes, weight_shapes


def _make_node(raw: Mapping) -> OpNode:
    kind = OpKind.parse(raw["kind"])
    hp = dict(raw.get("hyperparams") or {})
    missing = [h for h in REQUIRED_HP.get(kind, ()) if h not in hp]
    if missing:
        raise GraphError(f"node {raw['id']} ({kind.value}) is missing hyperparams {missing}")
    ws = raw.get("weight_shape")
    return OpNode(id=int(raw["id"]), kind=kind, hyperparams=hp,
                  weight_shape=tuple(int(d) for d in ws) if ws is not None else None)


def build_graph(nodes: Sequence[OpNode], pairs: Sequence[tuple], input_shape: Shape,
                batch_size: int | None = None, dtype_bytes: int = 4) -> CompGraph:
    """Validate topology and annotate every edge with its tensor shape."""
    if not nodes:
        raise EmptyGraph("graph must have at least one node")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate node ids")
    known = set(ids)
    pairs = [(int(s), int(d)) for s, d in pairs]
    for s, d in pairs:
        if s not in known or d not in known:
            raise GraphError(f"edge ({s}, {d}) references an unknown node")
        if s == d:
            raise CyclicGraph(f"self-loop on node {s}")
    input_shape = tuple(int(d) for d in input_shape)
    if batch_size is None:
        batch_size = input_shape[0]
    if batch_size < 1 or input_shape[0] != batch_size:
        raise ShapeMismatch(f"batch_size {batch_size} disagrees with input shape {input_shape}")
    if dtype_bytes < 1:
        raise GraphError("dtype_bytes must be positive")
    out_shapes, weight_shapes = infer_shapes(nodes, pairs, input_shape)
    edges = tuple(Edge(s, d, out_shapes[s]) for s, d in pairs)
    return CompGraph(nodes=tuple(nodes), edges=edges, batch_size=int(batch_size), input_shape=input_shape,
                     dtype_bytes=int(dtype_bytes), out_shapes=out_shapes, weight_shapes=weight_shapes)


def from_dict(raw: Mapping) -> CompGraph:
    try:
        nodes = [_make_node(n) for n in raw.get("nodes", [])]
        return build_graph(nodes, [tuple(e[:2]) for e in raw.get("edges", [])], raw["input_shape"],
                           raw.get("batch_size"), raw.get("dtype_bytes", 4))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"malformed graph description: {exc}") from exc


def load_graph(path, format: str = "json", batch_size: int | None = None) -> CompGraph:
    """Load a graph file. ``format`` is ``"json"`` or ``"onnx"`` (the operator-enum subset)."""
    path = Path(path)
    if format == "json":
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: invalid JSON ({exc})") from exc
        if batch_size is not None:
            raw = {**raw, "batch_size": batch_size, "input_shape": [batch_size, *raw["input_shape"][1:]]}
        return from_dict(raw)
    if format in ("onnx", "onnx-subset"):
        from .onnx_import import load_onnx
        return load_onnx(path, batch_size=batch_size)
    raise ValueError(f"unknown graph format {format!r}")


def save_graph(g: CompGraph, path) -> None:
    Path(path).write_text(g.to_json())
