"""Convert an ONNX model restricted to the supported operator set into a CompGraph.

Requires the optional ``onnx`` package. Weights must be initializers; the
single non-initializer graph input becomes ``input_shape`` (its batch
dimension is replaced by ``batch_size`` when given).
"""
from __future__ import annotations

from pathlib import Path

from .errors import GraphError, UnsupportedOp
from .graph_ir import CompGraph, OpKind, OpNode, build_graph

_KINDS = {
    "Conv": OpKind.CONV2D,
    "Gemm": OpKind.GEMM,
    "MatMul": OpKind.GEMM,
    "BatchNormalization": OpKind.BATCHNORM,
    "Relu": OpKind.RELU,
    "MaxPool": OpKind.MAXPOOL,
    "AveragePool": OpKind.AVGPOOL,
    "GlobalAveragePool": OpKind.GLOBALAVGPOOL,
    "Add": OpKind.ADD,
    "Concat": OpKind.CONCAT,
    "Flatten": OpKind.FLATTEN,
    "Softmax": OpKind.SOFTMAX,
}


def _attrs(node) -> dict:
    import onnx

    return {a.name: onnx.helper.get_attribute_value(a) for a in node.attribute}


def _window(attrs, op_type):
    k = list(attrs.get("kernel_shape", []))
    strides = list(attrs.get("strides", [1, 1]))
    pads = list(attrs.get("pads", [0, 0, 0, 0]))
    if len(k) != 2:
        raise UnsupportedOp(f"{op_type} with kernel_shape {k}")
    if len(set(strides)) != 1 or len(set(pads)) != 1:
        raise UnsupportedOp(f"{op_type} with asymmetric strides {strides} or pads {pads}")
    if attrs.get("auto_pad", b"NOTSET") not in (b"NOTSET", "NOTSET"):
        raise UnsupportedOp(f"{op_type} with auto_pad")
    return {"kernel_h": int(k[0]), "kernel_w": int(k[1]), "stride": int(strides[0]), "padding": int(pads[0])}


def convert_model(model, batch_size: int | None = None) -> CompGraph:
    graph = model.graph
    inits = {t.name: tuple(int(d) for d in t.dims) for t in graph.initializer}
    inputs = [i for i in graph.input if i.name not in inits]
    if len(inputs) != 1:
        raise GraphError(f"expected exactly one graph input, found {[i.name for i in inputs]}")
    dims = [d.dim_value if d.HasField("dim_value") else 0 for d in inputs[0].type.tensor_type.shape.dim]
    if batch_size is not None:
        dims[0] = batch_size
    if len(dims) != 4 or min(dims) < 1:
        raise GraphError(f"graph input must have a static NCHW shape, got {dims}")
    input_name = inputs[0].name

    producer: dict = {}
    nodes, pairs = [], []
    for nid, node in enumerate(graph.node):
        if node.op_type not in _KINDS:
            raise UnsupportedOp(node.op_type)
        kind = _KINDS[node.op_type]
        attrs = _attrs(node)
        hp: dict = {}
        weight_shape = None
        if kind == OpKind.CONV2D:
            w = inits[node.input[1]]
            hp = {**_window(attrs, "Conv"), "out_channels": w[0], "groups": int(attrs.get("group", 1)),
                  "has_bias": int(len(node.input) > 2 and node.input[2] != "")}
            weight_shape = w
        elif kind == OpKind.GEMM:
            w = inits.get(node.input[1])
            if w is None:
                raise UnsupportedOp(f"{node.op_type} without a constant weight")
            transposed = node.op_type == "Gemm" and attrs.get("transB", 0)
            out_f, in_f = (w[0], w[1]) if transposed else (w[1], w[0])
            hp = {"out_features": out_f, "has_bias": int(len(node.input) > 2 and node.input[2] != "")}
            weight_shape = (out_f, in_f)
        elif kind in (OpKind.MAXPOOL, OpKind.AVGPOOL):
            hp = _window(attrs, node.op_type)
        elif kind == OpKind.CONCAT and int(attrs.get("axis", 1)) != 1:
            raise UnsupportedOp("Concat on a non-channel axis")
        elif kind == OpKind.FLATTEN and int(attrs.get("axis", 1)) != 1:
            raise UnsupportedOp("Flatten with axis != 1")
        data_inputs = [i for i in node.input if i and i not in inits]
        if kind in (OpKind.CONV2D, OpKind.GEMM, OpKind.BATCHNORM):
            data_inputs = data_inputs[:1]
        srcs = [producer[i] for i in data_inputs if i in producer]
        if srcs and input_name in data_inputs:
            raise GraphError(f"node {node.name or nid} mixes the graph input with computed tensors")
        nodes.append(OpNode(nid, kind, hp, weight_shape))
        pairs.extend((s, nid) for s in srcs)
        for out in node.output[:1]:
            producer[out] = nid
    return build_graph(nodes, pairs, tuple(dims), dims[0])


def load_onnx(path, batch_size: int | None = None) -> CompGraph:
    try:
        import onnx
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise GraphError("reading ONNX files requires the optional onnx package (pip install onnx)") from exc
    path = Path(path)
    try:
        model = onnx.load(str(path))
    except Exception as exc:
        raise GraphError(f"{path}: not a readable ONNX model ({exc})") from exc
    return convert_model(model, batch_size)
