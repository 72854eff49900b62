"""Small dense reverse-mode autodiff on numpy arrays.

Everything SeerNet needs: linear layers, ReLU, concatenation, row gathers,
segment reductions (sum, mean, max, softmax-weighted pooling), masked MSE,
plus Adam and a flat-binary checkpoint format.

A :class:`Tape` records each op with a closure computing the
vector-Jacobian product. Ops are methods on the tape, so there is no global
recording state. Reductions accumulate in float64 whatever the storage
dtype.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteError, ShapeMismatch, StaleTape


class Param:
    """A named learnable array. ``version`` bumps on every assignment."""

    __slots__ = ("name", "value", "version")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.version = 0

    def assign(self, value: np.ndarray) -> None:
        if value.shape != self.value.shape:
            raise ShapeMismatch(f"{self.name}: cannot assign {value.shape} over {self.value.shape}")
        self.value = value
        self.version += 1

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


@dataclass
class MlpLayer:
    weight: Param  # (out, in)
    bias: Param  # (out,)
    activation: str = "relu"  # or "none"

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        w, b = self.weight.value, self.bias.value
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"layer weight {w.shape} and bias {b.shape} are inconsistent")

    @property
    def in_features(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.value.shape[0]

    def params(self) -> list:
        return [self.weight, self.bias]


def init_layer(rng: np.random.Generator, name: str, n_in: int, n_out: int, activation: str = "relu",
               dtype=np.float64) -> MlpLayer:
    """He-uniform for ReLU layers, Xavier-uniform for linear ones; zero bias."""
    if activation == "relu":
        limit = np.sqrt(6.0 / n_in)
    else:
        limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
    return MlpLayer(Param(f"{name}.weight", w), Param(f"{name}.bias", np.zeros(n_out, dtype=dtype)), activation)


class Segments:
    """Assignment of ``m`` rows to ``n`` segments, used for scatter/gather.

    ``matrix`` is the sparse ``n x m`` indicator; ``matrix @ x`` sums rows per
    segment and ``matrix.T @ y`` broadcasts segment rows back.
    """

    def __init__(self, ids: np.ndarray, n: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ShapeMismatch(f"segment ids out of range [0, {n})")
        self.ids = ids
        self.n = n
        m = ids.size
        self.matrix = sp.csr_matrix((np.ones(m), (ids, np.arange(m))), shape=(n, m))
        self.counts = np.bincount(ids, minlength=n).astype(np.float64)
        # contiguous, non-empty segments allow reduceat instead of ufunc.at
        self._starts = None
        if m and np.all(self.counts > 0) and np.all(np.diff(ids) >= 0):
            self._starts = np.concatenate([[0], np.cumsum(self.counts[:-1]).astype(np.int64)])

    def sum(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x.astype(np.float64, copy=False))

    def gather(self, y: np.ndarray) -> np.ndarray:
        return y[self.ids]

    def max(self, x: np.ndarray) -> np.ndarray:
        if self._starts is not None:
            return np.maximum.reduceat(x, self._starts, axis=0).astype(np.float64)
        out = np.full((self.n, x.shape[1]), -np.inf)
        np.maximum.at(out, self.ids, x)
        out[self.counts == 0] = 0.0
        return out


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {name}")


class Var:
    __slots__ = ("value", "index")

    def __init__(self, value: np.ndarray, index: int):
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Forward-pass record; :func:`backward` replays it in exact reverse."""

    def __init__(self):
        self._records: list = []  # (name, parent indices, vjp) per Var index
        self._params: dict = {}  # Var index -> (Param, version at record time)
        self._inputs: dict = {}  # Var index -> (input name, value)
        self.output: Var | None = None

    def __len__(self):
        return len(self._records)

    def _push(self, name: str, value: np.ndarray, parents: Sequence[Var], vjp: Callable | None) -> Var:
        _check_finite(name, value)
        v = Var(value, len(self._records))
        self._records.append((name, tuple(p.index for p in parents), vjp))
        self.output = v
        return v

    def op_names(self) -> list:
        return [r[0] for r in self._records]

    # leaves

    def param(self, p: Param) -> Var:
        v = self._push(f"param:{p.name}", p.value, (), None)
        self._params[v.index] = (p, p.version)
        return v

    def input(self, x: np.ndarray, name: str = "x") -> Var:
        v = self._push(f"input:{name}", np.asarray(x), (), None)
        self._inputs[v.index] = (name, v.value)
        return v

    # ops

    def matmul_t(self, x: Var, w: Var) -> Var:
        """``x @ w.T``."""
        if x.shape[-1] != w.shape[1]:
            raise ShapeMismatch(f"matmul: {x.shape} @ {w.shape}.T")
        xv, wv = x.value, w.value
        return self._push("matmul_t", xv @ wv.T, (x, w), lambda g: (g @ wv, g.T @ xv))

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise sum; ``b`` may be a row vector broadcast over ``a``."""
        if a.shape == b.shape:
            return self._push("add", a.value + b.value, (a, b), lambda g: (g, g))
        if b.value.ndim == 1 and a.shape[-1] == b.shape[0]:
            return self._push("add_row", a.value + b.value, (a, b),
                              lambda g: (g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)))
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}")

    def mul(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeMismatch(f"mul: {a.shape} * {b.shape}")
        av, bv = a.value, b.value
        return self._push("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        return self._push("relu", np.where(mask, x.value, 0).astype(x.value.dtype), (x,),
                          lambda g: (g * mask,))

    def linear(self, x: Var, layer: MlpLayer) -> Var:
        if x.shape[-1] != layer.in_features:
            raise ShapeMismatch(f"layer {layer.weight.name} expects width {layer.in_features}, got {x.shape[-1]}")
        y = self.add(self.matmul_t(x, self.param(layer.weight)), self.param(layer.bias))
        return self.relu(y) if layer.activation == "relu" else y

    def mlp(self, x: Var, layers: Sequence[MlpLayer]) -> Var:
        for layer in layers:
            x = self.linear(x, layer)
        return x

    def concat(self, parts: Sequence[Var]) -> Var:
        widths = [p.shape[1] for p in parts]
        if len({p.shape[0] for p in parts}) != 1:
            raise ShapeMismatch(f"concat: row counts {[p.shape[0] for p in parts]}")
        cuts = np.cumsum(widths)[:-1]
        return self._push("concat", np.concatenate([p.value for p in parts], axis=1), parts,
                          lambda g: tuple(np.split(g, cuts, axis=1)))

    def gather(self, x: Var, seg: Segments) -> Var:
        """Row ``i`` of the output is row ``seg.ids[i]`` of ``x``."""
        dtype = x.value.dtype
        return self._push("gather", seg.gather(x.value), (x,), lambda g: (seg.sum(g).astype(dtype),))

    def segment_sum(self, x: Var, seg: Segments) -> Var:
        dtype = x.value.dtype
        return self._push("segment_sum", seg.sum(x.value).astype(dtype), (x,),
                          lambda g: (seg.gather(g),))

    def segment_mean(self, x: Var, seg: Segments) -> Var:
        """Per-segment mean; empty segments give the zero vector."""
        dtype = x.value.dtype
        denom = np.maximum(seg.counts, 1.0)[:, None]
        out = (seg.sum(x.value) / denom).astype(dtype)
        return self._push("segment_mean", out, (x,), lambda g: (seg.gather(g / denom).astype(dtype),))

    def segment_max(self, x: Var, seg: Segments) -> Var:
        """Elementwise max per segment; the gradient is split evenly across ties."""
        xv = x.value
        out = seg.max(xv)
        hit = (xv == out[seg.ids]).astype(np.float64)
        ties = np.maximum(seg.sum(hit), 1.0)
        return self._push("segment_max", out.astype(xv.dtype), (x,),
                          lambda g: ((hit * seg.gather(g / ties)).astype(xv.dtype),))

    def segment_softmax_pool(self, x: Var, seg: Segments) -> Var:
        """Per segment and per column: ``sum_i softmax(x[:, d])_i * x[i, d]``."""
        xv = x.value
        w = segment_softmax(xv, seg)
        out = seg.sum(w * xv)
        ob = out[seg.ids]
        return self._push("segment_softmax_pool", out.astype(xv.dtype), (x,),
                          lambda g: ((w * (1.0 + xv - ob) * seg.gather(g)).astype(xv.dtype),))

    def masked_mse(self, pred: Var, target: np.ndarray, mask: np.ndarray | None = None) -> Var:
        """Mean squared error over entries where ``mask`` is true (scalar output)."""
        if pred.shape != target.shape:
            raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
        mask = np.ones(pred.shape, dtype=bool) if mask is None else mask
        n = max(int(mask.sum()), 1)
        diff = np.where(mask, pred.value.astype(np.float64) - target, 0.0)
        loss = np.array((diff ** 2).sum() / n)
        dtype = pred.value.dtype
        return self._push("mse", loss, (pred,), lambda g: ((2.0 * g * diff / n).astype(dtype),))


def segment_softmax(x: np.ndarray, seg: Segments) -> np.ndarray:
    """Column-wise softmax within each segment (max-subtracted)."""
    m = seg.max(x)
    e = np.exp(x.astype(np.float64) - m[seg.ids])
    return e / seg.sum(e)[seg.ids]


def softmax_rows(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Softmax along ``axis`` (default: across rows, one distribution per column)."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite("softmax_rows input", x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Gradients:
    params: dict  # Param.name -> array
    inputs: dict  # input name -> array


def backward(tape: Tape, upstream=None, output: Var | None = None) -> Gradients:
    """Reverse pass from ``output`` (default: the last recorded value).

    Raises :class:`StaleTape` if any recorded parameter was reassigned since
    the forward pass. A tape may be replayed for several outputs.
    """
    output = tape.output if output is None else output
    if output is None:
        raise ValueError("empty tape")
    for p, version in tape._params.values():
        if p.version != version:
            raise StaleTape(f"parameter {p.name} changed after the forward pass")
    if upstream is None:
        upstream = np.ones_like(output.value)
    upstream = np.asarray(upstream, dtype=output.value.dtype).reshape(output.value.shape)
    grads: dict = {output.index: upstream}
    for idx in range(output.index, -1, -1):
        _, parents, vjp = tape._records[idx]
        if vjp is None or idx not in grads:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(idx)
        for parent, pg in zip(parents, vjp(g)):
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    pgrads: dict = {}
    for idx, (p, _) in tape._params.items():
        g = grads.get(idx)
        if g is None:
            g = np.zeros_like(p.value)
        pgrads[p.name] = pgrads[p.name] + g if p.name in pgrads else g
    igrads = {name: grads[idx] if idx in grads else np.zeros_like(value)
              for idx, (name, value) in tape._inputs.items()}
    return Gradients(pgrads, igrads)


def mlp_forward(layers: Sequence[MlpLayer], x: np.ndarray):
    """Apply ``layers`` to ``x``; returns ``(y, tape)`` for :func:`backward`."""
    tape = Tape()
    y = tape.mlp(tape.input(np.asarray(x), "x"), layers)
    return y.value, tape


# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam: grad {g.shape} for param {k} {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


class Adam:
    """Stateful wrapper applying :func:`adam_step` to a list of :class:`Param`."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.state = adam_init({p.name: p.value for p in self.params})

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        new, self.state = adam_step({p.name: p.value for p in self.params}, grads, self.state, self.lr)
        for p in self.params:
            _check_finite(f"adam update of {p.name}", new[p.name])
            p.assign(new[p.name])


# checkpoints: flat little-endian binary + JSON manifest

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[Param], meta: Mapping | None = None) -> Path:
    """Write ``path`` (raw concatenated arrays) and ``path.with_suffix('.json')``."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for p in params:
        arr = np.ascontiguousarray(p.value)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": p.name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    blob = b"".join(chunks)
    path.write_bytes(blob)
    manifest = {"format_version": CHECKPOINT_VERSION, "tensors": entries,
                "sha256": hashlib.sha256(blob).hexdigest(), **(meta or {})}
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_checkpoint(path):
    """Return ``(arrays by name, manifest)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    arrays = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return arrays, manifest
