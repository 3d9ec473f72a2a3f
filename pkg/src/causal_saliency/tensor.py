"""Tape-based reverse-mode autodiff over dense float64 arrays.

A forward pass records one node per op on a :class:`Graph`. Calling
:func:`backward` walks the tape in reverse and fills ``grad`` on every
``requires_grad`` leaf reachable from the output. The ReLU backward rule is
a parameter of the backward pass, so the same recorded forward pass can be
differentiated either as a true gradient (``ReluRule.VANILLA``) or with the
guided-backpropagation rule (``ReluRule.GUIDED``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class ReluRule(enum.Enum):
    VANILLA = "vanilla"
    GUIDED = "guided"


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors produced by an op remember the graph and node that created them.
    Leaf tensors (inputs, parameters) are registered lazily the first time an
    op on a given graph consumes them, so a parameter can take part in many
    independent forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "graph", "node")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.graph: Optional[Graph] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    ctx: dict = field(default_factory=dict)
    tensor: Optional[Tensor] = None  # leaves only; op nodes keep the bare array
    value: Optional[np.ndarray] = None


class Graph:
    """Append-only tape of nodes. Inputs always precede outputs.

    With ``record=False`` ops still produce correct forward values but keep no
    backward context, which saves memory during inference.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self.record = record
        self._leaf_ids: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"node input {i} does not exist")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, t: Tensor) -> int:
        if t.graph is self and t.node is not None:
            return t.node
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = self._append(Node("leaf", (), tensor=t))
        return self._leaf_ids[key]

    def emit(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, **ctx) -> Tensor:
        ids = tuple(self.leaf(t) for t in inputs)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.requires_grad = any(_needs_grad(self, i) for i in ids)
        result.grad = None
        result.graph = self
        node = Node(op, ids, ctx if self.record else {}, value=out)
        result.node = self._append(node)
        return result


def _needs_grad(graph: Graph, node_id: int) -> bool:
    node = graph.nodes[node_id]
    if node.op == "leaf":
        return node.tensor.requires_grad
    return True


def _graph_of(*tensors: Tensor, graph: Optional[Graph] = None) -> Graph:
    if graph is not None:
        return graph
    for t in tensors:
        if t.graph is not None:
            return t.graph
    return Graph()


# --------------------------------------------------------------------------
# Forward ops
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, H', W', C*kh*kw), channel-major within a patch
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           graph: Optional[Graph] = None) -> Tensor:
    """2-D cross-correlation of an (N, C, H, W) batch with (F, C, kh, kw) filters."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    g = _graph_of(x, kernel, bias, graph=graph)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    out = cols @ kernel.data.reshape(f, -1).T + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return g.emit("conv2d", (x, kernel, bias), out, cols=cols, x_shape=x.shape,
                  stride=stride, padding=padding)


def dense(x: Tensor, weight: Tensor, bias: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dimensions disagree: {x.shape[1]} vs {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    g = _graph_of(x, weight, bias, graph=graph)
    return g.emit("dense", (x, weight, bias), x.data @ weight.data + bias.data)


def relu(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    g = _graph_of(x, graph=graph)
    positive = x.data > 0
    return g.emit("relu", (x,), np.where(positive, x.data, 0.0), positive=positive)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None,
              graph: Optional[Graph] = None) -> Tensor:
    """Max pooling; ties go to the first element of the window in row-major order."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial dims {h}x{w}")
    g = _graph_of(x, graph=graph)
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return g.emit("maxpool2d", (x,), np.ascontiguousarray(out), arg=arg, x_shape=x.shape,
                  window=window, stride=stride)


def flatten(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    g = _graph_of(x, graph=graph)
    return g.emit("reshape", (x,), x.data.reshape(x.shape[0], -1), x_shape=x.shape)


def add(a: Tensor, b: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    g = _graph_of(a, b, graph=graph)
    return g.emit("add", (a, b), a.data + b.data)


def mul(a: Tensor, b: Tensor, graph: Optional[Graph] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes, got {a.shape} and {b.shape}")
    g = _graph_of(a, b, graph=graph)
    return g.emit("mul", (a, b), a.data * b.data, a=a.data, b=b.data)


def square(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    g = _graph_of(x, graph=graph)
    return g.emit("square", (x,), x.data * x.data, x=x.data)


def tensor_sum(x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    g = _graph_of(x, graph=graph)
    return g.emit("sum", (x,), np.array([x.data.sum()]), x_shape=x.shape)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int],
                          graph: Optional[Graph] = None) -> Tensor:
    """Mean negative log-softmax of the labelled class, as a 1-element tensor."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, k), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    g = _graph_of(logits, graph=graph)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    probs = np.exp(shifted - log_z[:, None])
    return g.emit("xent", (logits,), np.array([-log_p.mean()]), probs=probs, labels=labels)


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------

def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    _, ho, wo, _ = dcols.shape
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def _backward_op(node: Node, gout: np.ndarray, inputs: list[np.ndarray], rule: ReluRule):
    op, ctx = node.op, node.ctx
    if op == "conv2d":
        x_shape, cols = ctx["x_shape"], ctx["cols"]
        w = inputs[1]
        f, _, kh, kw = w.shape
        g2 = gout.transpose(0, 2, 3, 1)  # N, H', W', F
        gflat = g2.reshape(-1, f)
        dw = (gflat.T @ cols.reshape(gflat.shape[0], -1)).reshape(w.shape)
        db = gflat.sum(axis=0)
        dcols = g2 @ w.reshape(f, -1)
        dx = _col2im(dcols, x_shape, kh, kw, ctx["stride"], ctx["padding"])
        return dx, dw, db
    if op == "dense":
        x, w = inputs[0], inputs[1]
        return gout @ w.T, x.T @ gout, gout.sum(axis=0)
    if op == "relu":
        mask = ctx["positive"]
        if rule is ReluRule.GUIDED:
            return (np.where(mask & (gout > 0), gout, 0.0),)
        return (np.where(mask, gout, 0.0),)
    if op == "maxpool2d":
        n, c, h, w = ctx["x_shape"]
        k, s, arg = ctx["window"], ctx["stride"], ctx["arg"]
        ho, wo = arg.shape[2], arg.shape[3]
        rows = (np.arange(ho) * s)[None, None, :, None] + arg // k
        cols = (np.arange(wo) * s)[None, None, None, :] + arg % k
        dx = np.zeros((n, c, h, w))
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        if s >= k:
            dx[ni, ci, rows, cols] = gout  # windows are disjoint
        else:
            np.add.at(dx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), gout)
        return (dx,)
    if op == "reshape":
        return (gout.reshape(ctx["x_shape"]),)
    if op == "add":
        return gout, gout
    if op == "mul":
        return gout * ctx["b"], gout * ctx["a"]
    if op == "square":
        return (2.0 * ctx["x"] * gout,)
    if op == "sum":
        return (np.full(ctx["x_shape"], gout[0]),)
    if op == "xent":
        probs, labels = ctx["probs"], ctx["labels"]
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return (d * (gout[0] / len(labels)),)
    raise NotImplementedError(f"no backward rule for op {op!r}")


def backward(graph: Graph, output_node: int, seed_grad: Any = None,
             rule: ReluRule = ReluRule.VANILLA) -> dict[int, np.ndarray]:
    """Propagate ``seed_grad`` from ``output_node`` back through the tape.

    Every reachable leaf with ``requires_grad`` gets its ``grad`` overwritten.
    Returns the gradient of every reachable node keyed by node id, which is how
    callers read gradients of intermediate (non-leaf) tensors.
    """
    if not graph.record:
        raise RuntimeError("graph was built with record=False and cannot be differentiated")
    if not 0 <= output_node < len(graph.nodes):
        raise IndexError(f"node id {output_node} out of range for graph of {len(graph.nodes)} nodes")
    values = _node_values(graph, output_node)
    out_shape = values[output_node].shape
    if seed_grad is None:
        seed = np.ones(out_shape)
    else:
        seed = np.asarray(seed_grad.data if isinstance(seed_grad, Tensor) else seed_grad, dtype=np.float64)
    if seed.shape != out_shape:
        raise ShapeError(f"seed gradient shape {seed.shape} does not match output shape {out_shape}")

    grads: dict[int, np.ndarray] = {output_node: seed}
    for idx in range(output_node, -1, -1):
        gout = grads.get(idx)
        if gout is None:
            continue
        node = graph.nodes[idx]
        if node.op == "leaf":
            continue
        ins = [values[i] for i in node.inputs]
        for i, gin in zip(node.inputs, _backward_op(node, gout, ins, rule)):
            if not _needs_grad(graph, i):
                continue
            grads[i] = gin if i not in grads else grads[i] + gin
    for idx, node in enumerate(graph.nodes[:output_node + 1]):
        if node.op == "leaf" and node.tensor.requires_grad and idx in grads:
            node.tensor.grad = grads[idx]
    return grads


def _node_values(graph: Graph, upto: int) -> dict[int, np.ndarray]:
    return {idx: node.tensor.data if node.op == "leaf" else node.value
            for idx, node in enumerate(graph.nodes[:upto + 1])}


def grad_check(scalar_function: Callable[[Tensor], Tensor], point: Any,
               epsilon: float = 1e-6) -> float:
    """Max relative error between the Vanilla-rule gradient and central differences.

    ``scalar_function`` must build its graph from the tensor it is given and
    return a single-element tensor. Guided gradients are not gradients, so only
    the Vanilla rule is checked.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = scalar_function(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    if out.graph is None:
        analytic = np.zeros_like(x0)
    else:
        backward(out.graph, out.node, np.ones(out.shape), ReluRule.VANILLA)
        analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        bumped = x0.copy().reshape(-1)
        bumped[i] += epsilon
        f_plus = float(scalar_function(Tensor(bumped.reshape(x0.shape))).data.reshape(-1)[0])
        bumped[i] -= 2 * epsilon
        f_minus = float(scalar_function(Tensor(bumped.reshape(x0.shape))).data.reshape(-1)[0])
        flat[i] = (f_plus - f_minus) / (2 * epsilon)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max())
