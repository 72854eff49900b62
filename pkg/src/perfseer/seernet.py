"""SeerNet: one graph-network block over a PerfGraph plus MLP prediction heads.

Forward pass for a batch of graphs::

    encode     V0 = enc_v(V), E0 = enc_e(E), U0 = enc_u(u), z0 = softmax-pool(V0)
    edges      e'_j  = MLP_e(e_j | v_src | v_dst)
    to nodes   ebar_i = mean of e'_j over edges entering i (zero if none)
    nodes      v'_i  = MLP_v(ebar_i | (v_i + z0) | u)
    global node  z'  = MLP_z(softmax-pool(V') + z0)
    readout    vbar  = blend(max(V') | mean(V'))
    global     u'    = MLP_u(vbar | z' | u)
    heads      y_k   = head_k(u')

``softmax-pool`` weights node ``i`` in column ``d`` by
``exp(x[i, d]) / sum_k exp(x[k, d])``. With ``synmm=False`` the readout is
the plain mean; with ``gnpb=False`` the global node is dropped (z0 = 0 in the
node update and z' is not fed to MLP_u).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import NotFitted, ShapeMismatch, WidthMismatch
from .featurize import EDGE_FIELDS, GLOBAL_FIELDS, NODE_FIELDS, PerfGraph
from .numkernel import MlpLayer, Param, Segments, Tape, Var, init_layer

METRICS = ("infer_time", "infer_mem", "infer_util", "train_time", "train_mem", "train_util")


@dataclass
class SeerNetConfig:
    hidden: int = 256
    head_hidden: int = 256
    heads: tuple = ("infer_time",)
    synmm: bool = True
    gnpb: bool = True
    seed: int = 0
    dtype: str = "float32"
    node_width: int = len(NODE_FIELDS)
    edge_width: int = len(EDGE_FIELDS)
    global_width: int = len(GLOBAL_FIELDS)

    def __post_init__(self):
        self.heads = tuple(self.heads)
        if not self.heads:
            raise ValueError("at least one prediction head is required")

    def to_dict(self) -> dict:
        return {**asdict(self), "heads": list(self.heads)}

    @classmethod
    def from_dict(cls, d) -> "SeerNetConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class GraphBatch:
    """Several normalized PerfGraphs stacked into one disjoint graph."""

    node_x: np.ndarray
    edge_x: np.ndarray
    global_x: np.ndarray
    node_graph: Segments  # node -> graph
    edge_src: Segments  # edge -> source node
    edge_dst: Segments  # edge -> target node
    num_graphs: int = field(default=0)

    @classmethod
    def from_graphs(cls, pgs: Sequence[PerfGraph], dtype="float64") -> "GraphBatch":
        if not pgs:
            raise ValueError("empty batch")
        for pg in pgs:
            if pg.normalization is None:
                raise NotFitted("PerfGraph must be normalized before prediction")
        offsets = np.cumsum([0] + [len(pg.V) for pg in pgs])
        n_nodes = int(offsets[-1])
        src = np.concatenate([pg.src + o for pg, o in zip(pgs, offsets)]).astype(np.int64)
        dst = np.concatenate([pg.dst + o for pg, o in zip(pgs, offsets)]).astype(np.int64)
        graph_of_node = np.repeat(np.arange(len(pgs)), [len(pg.V) for pg in pgs])
        return cls(
            node_x=np.concatenate([pg.node_x for pg in pgs]).astype(dtype),
            edge_x=np.concatenate([pg.edge_x for pg in pgs]).astype(dtype),
            global_x=np.stack([pg.global_x for pg in pgs]).astype(dtype),
            node_graph=Segments(graph_of_node, len(pgs)),
            edge_src=Segments(src, n_nodes),
            edge_dst=Segments(dst, n_nodes),
            num_graphs=len(pgs),
        )


class SeerNet:
    """Parameters and forward pass. One head for SeerNet, several for SeerNet-Multi."""

    def __init__(self, config: SeerNetConfig):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        H, dt = c.hidden, np.dtype(c.dtype)
        self.enc_v = init_layer(rng, "enc_v", c.node_width, H, "none", dt)
        self.enc_e = init_layer(rng, "enc_e", c.edge_width, H, "none", dt)
        self.enc_u = init_layer(rng, "enc_u", c.global_width, H, "none", dt)
        self.mlp_e = [init_layer(rng, "mlp_e", 3 * H, H, "relu", dt)]
        self.mlp_v = [init_layer(rng, "mlp_v", 3 * H, H, "relu", dt)]
        self.mlp_z = [init_layer(rng, "mlp_z.0", H, H, "relu", dt), init_layer(rng, "mlp_z.1", H, H, "none", dt)]
        self.synmm_blend = init_layer(rng, "synmm_blend", 2 * H, H, "none", dt)
        # start from the plain mean readout with a silent global node; random
        # blends train to a worse optimum than the mean-only model
        self.synmm_blend.weight.value[:] = np.hstack([np.zeros((H, H)), np.eye(H)])
        self.mlp_z[1].weight.value[:] = 0
        self.mlp_u = [init_layer(rng, "mlp_u", (3 if c.gnpb else 2) * H, H, "relu", dt)]
        self.heads = [
            [init_layer(rng, f"head.{name}.0", H, c.head_hidden, "relu", dt),
             init_layer(rng, f"head.{name}.1", c.head_hidden, 1, "none", dt)]
            for name in c.heads
        ]

    # parameter bookkeeping

    def shared_layers(self) -> list:
        layers = [self.enc_v, self.enc_e, self.enc_u, *self.mlp_e, *self.mlp_v]
        if self.config.gnpb:
            layers += self.mlp_z
        if self.config.synmm:
            layers.append(self.synmm_blend)
        return layers + self.mlp_u

    def shared_params(self) -> list:
        return [p for layer in self.shared_layers() for p in layer.params()]

    def head_params(self, k: int) -> list:
        return [p for layer in self.heads[k] for p in layer.params()]

    def params(self) -> list:
        return self.shared_params() + [p for k in range(len(self.heads)) for p in self.head_params(k)]

    def param_dict(self) -> dict:
        return {p.name: p for p in self.params()}

    def load_arrays(self, arrays) -> None:
        for p in self.params():
            if p.name not in arrays:
                raise WidthMismatch(f"checkpoint has no tensor {p.name}")
            p.assign(np.asarray(arrays[p.name], dtype=p.value.dtype).reshape(p.value.shape))

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params())

    # SeerBlock stages

    def encode(self, tape: Tape, batch: GraphBatch):
        c = self.config
        if (batch.node_x.shape[1], batch.edge_x.shape[1], batch.global_x.shape[1]) != \
                (c.node_width, c.edge_width, c.global_width):
            raise WidthMismatch(
                f"feature widths {(batch.node_x.shape[1], batch.edge_x.shape[1], batch.global_x.shape[1])} "
                f"do not match the model {(c.node_width, c.edge_width, c.global_width)}")
        V0 = tape.linear(tape.input(batch.node_x, "node_x"), self.enc_v)
        E0 = tape.linear(tape.input(batch.edge_x, "edge_x"), self.enc_e)
        U0 = tape.linear(tape.input(batch.global_x, "global_x"), self.enc_u)
        z0 = tape.segment_softmax_pool(V0, batch.node_graph) if c.gnpb else None
        return U0, V0, E0, z0

    def edge_update(self, tape: Tape, E0: Var, V0: Var, batch: GraphBatch) -> Var:
        cat = tape.concat([E0, tape.gather(V0, batch.edge_src), tape.gather(V0, batch.edge_dst)])
        return tape.mlp(cat, self.mlp_e)

    def edge_to_node(self, tape: Tape, E1: Var, batch: GraphBatch) -> Var:
        return tape.segment_mean(E1, batch.edge_dst)

    def node_update(self, tape: Tape, ebar: Var, V0: Var, z0: Var | None, U0: Var, batch: GraphBatch) -> Var:
        v = V0 if z0 is None else tape.add(V0, tape.gather(z0, batch.node_graph))
        cat = tape.concat([ebar, v, tape.gather(U0, batch.node_graph)])
        return tape.mlp(cat, self.mlp_v)

    def global_node_update(self, tape: Tape, V1: Var, z0: Var, batch: GraphBatch) -> Var:
        vz = tape.segment_softmax_pool(V1, batch.node_graph)
        return tape.mlp(tape.add(vz, z0), self.mlp_z)

    def synmm(self, tape: Tape, V1: Var, batch: GraphBatch) -> Var:
        if not self.config.synmm:
            return tape.segment_mean(V1, batch.node_graph)
        pooled = tape.concat([tape.segment_max(V1, batch.node_graph), tape.segment_mean(V1, batch.node_graph)])
        return tape.linear(pooled, self.synmm_blend)

    def global_update(self, tape: Tape, vu: Var, z1: Var | None, U0: Var) -> Var:
        parts = [vu, U0] if z1 is None else [vu, z1, U0]
        return tape.mlp(tape.concat(parts), self.mlp_u)

    def embed(self, tape: Tape, batch: GraphBatch) -> Var:
        """One SeerBlock; returns the graph embedding u' (one row per graph)."""
        U0, V0, E0, z0 = self.encode(tape, batch)
        E1 = self.edge_update(tape, E0, V0, batch)
        ebar = self.edge_to_node(tape, E1, batch)
        V1 = self.node_update(tape, ebar, V0, z0, U0, batch)
        z1 = self.global_node_update(tape, V1, z0, batch) if z0 is not None else None
        vu = self.synmm(tape, V1, batch)
        u1 = self.global_update(tape, vu, z1, U0)
        if u1.shape[1] != self.config.hidden:
            raise ShapeMismatch(f"graph embedding width {u1.shape[1]} != {self.config.hidden}")
        return u1

    def forward(self, tape: Tape, batch: GraphBatch, heads: Sequence[int] | None = None) -> list:
        """Per-head outputs, each ``(num_graphs, 1)``, in normalized target space."""
        u1 = self.embed(tape, batch)
        heads = range(len(self.heads)) if heads is None else heads
        return [tape.mlp(u1, self.heads[k]) for k in heads]

    def predict(self, pgs: Sequence[PerfGraph], head_index: int = 0) -> np.ndarray:
        if not 0 <= head_index < len(self.heads):
            raise IndexError(f"head {head_index} out of range ({len(self.heads)} heads)")
        batch = GraphBatch.from_graphs(pgs, self.config.dtype)
        out = self.forward(Tape(), batch, [head_index])[0]
        return out.value[:, 0].astype(np.float64)

    def predict_all(self, pgs: Sequence[PerfGraph]) -> np.ndarray:
        """``(len(pgs), num_heads)`` normalized predictions."""
        batch = GraphBatch.from_graphs(pgs, self.config.dtype)
        outs = self.forward(Tape(), batch)
        return np.concatenate([o.value for o in outs], axis=1).astype(np.float64)


def predict(pg: PerfGraph, model: SeerNet, head_index: int = 0) -> float:
    return float(model.predict([pg], head_index)[0])


__all__ = ["METRICS", "GraphBatch", "MlpLayer", "Param", "SeerNet", "SeerNetConfig", "predict"]
