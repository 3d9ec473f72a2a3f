"""Model definitions, initialization, randomization, prediction and model files."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import container
from .tensor import Graph, ShapeError, Tensor, conv2d, dense, flatten, maxpool2d, relu


class ArchitectureError(ValueError):
    """The layer chain is not shape-consistent or not expressible."""


class UnsupportedArchitectureError(ArchitectureError):
    """The architecture contains a nonlinearity other than ReLU."""


@dataclass(frozen=True)
class Layer:
    kind: str  # conv2d | relu | maxpool | flatten | dense
    args: tuple[int, ...] = ()

    def __str__(self) -> str:
        return f"{self.kind}({','.join(map(str, self.args))})" if self.args else self.kind


_ARITY = {"conv2d": (2, 4), "relu": (0, 0), "maxpool": (1, 2), "flatten": (0, 0), "dense": (1, 1)}


def conv(out_channels: int, kernel: int, stride: int = 1, padding: int = 0) -> Layer:
    return Layer("conv2d", (out_channels, kernel, stride, padding))


def pool(window: int, stride: Optional[int] = None) -> Layer:
    return Layer("maxpool", (window, window if stride is None else stride))


RELU = Layer("relu")
FLATTEN = Layer("flatten")


def fc(out_features: int) -> Layer:
    return Layer("dense", (out_features,))


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        layer_shapes(self)

    def descriptor(self) -> str:
        c, h, w = self.input_shape
        return ";".join([f"in={c}x{h}x{w}", f"k={self.num_classes}"] + [str(l) for l in self.layers])

    @classmethod
    def from_descriptor(cls, text: str) -> "ArchSpec":
        parts = [p.strip() for p in text.split(";") if p.strip()]
        m_in = re.fullmatch(r"in=(\d+)x(\d+)x(\d+)", parts[0]) if parts else None
        m_k = re.fullmatch(r"k=(\d+)", parts[1]) if len(parts) > 1 else None
        if not m_in or not m_k:
            raise ArchitectureError(f"descriptor must start with 'in=CxHxW;k=K', got {text!r}")
        layers = []
        for p in parts[2:]:
            m = re.fullmatch(r"([a-z0-9]+)(?:\(([\d,\s]*)\))?", p)
            if not m:
                raise ArchitectureError(f"cannot parse layer {p!r}")
            args = tuple(int(a) for a in m.group(2).split(",")) if m.group(2) else ()
            layers.append(Layer(m.group(1), args))
        return cls(tuple(layers), tuple(int(g) for g in m_in.groups()), int(m_k.group(1)))


def check_relu_only(layers) -> None:
    for layer in layers:
        if layer.kind not in _ARITY:
            raise UnsupportedArchitectureError(
                f"layer kind {layer.kind!r} is not supported; ReLU is the only nonlinearity")


def layer_shapes(arch: ArchSpec) -> list[tuple[int, ...]]:
    """Per-example output shape after each layer; validates the chain."""
    check_relu_only(arch.layers)
    shape: tuple[int, ...] = arch.input_shape
    if len(shape) != 3 or min(shape) < 1:
        raise ArchitectureError(f"input shape must be positive (C, H, W), got {shape}")
    shapes = []
    for i, layer in enumerate(arch.layers):
        lo, hi = _ARITY[layer.kind]
        if not lo <= len(layer.args) <= hi or any(a < 0 for a in layer.args):
            raise ArchitectureError(f"layer {i} {layer}: bad arguments")
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ArchitectureError(f"layer {i} conv2d needs a (C, H, W) input, got {shape}")
            f, k = layer.args[:2]
            s = layer.args[2] if len(layer.args) > 2 else 1
            p = layer.args[3] if len(layer.args) > 3 else 0
            if f < 1 or k < 1 or s < 1 or k > shape[1] + 2 * p or k > shape[2] + 2 * p:
                raise ArchitectureError(f"layer {i} {layer} does not fit input {shape}")
            shape = (f, (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
        elif layer.kind == "maxpool":
            k = layer.args[0]
            s = layer.args[1] if len(layer.args) > 1 else k
            if len(shape) != 3 or k < 1 or s < 1 or k > shape[1] or k > shape[2]:
                raise ArchitectureError(f"layer {i} {layer} does not fit input {shape}")
            shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ArchitectureError(f"layer {i} dense needs a flat input, got {shape}; add flatten")
            if layer.args[0] < 1:
                raise ArchitectureError(f"layer {i} dense needs a positive width")
            shape = (layer.args[0],)
        shapes.append(shape)
    if not shapes or shapes[-1] != (arch.num_classes,) or arch.layers[-1].kind != "dense":
        raise ArchitectureError(f"last layer must be dense({arch.num_classes})")
    return shapes


def mnist_arch(num_classes: int = 10, input_shape=(1, 28, 28)) -> ArchSpec:
    """Two conv/pool stages and a 128-unit hidden dense layer."""
    return ArchSpec((conv(16, 5, 1, 2), RELU, pool(2), conv(32, 5, 1, 2), RELU, pool(2),
                     FLATTEN, fc(128), RELU, fc(num_classes)), input_shape, num_classes)


def pair_arch(num_classes: int = 5, input_shape=(1, 64, 128)) -> ArchSpec:
    """Same family as :func:`mnist_arch` for wide two-tile inputs; the first conv strides by 2."""
    return ArchSpec((conv(16, 5, 2, 2), RELU, pool(2), conv(32, 5, 1, 2), RELU, pool(2),
                     FLATTEN, fc(128), RELU, fc(num_classes)), input_shape, num_classes)


@dataclass
class Model:
    arch: ArchSpec
    params: dict[str, Tensor]
    init_seed: int
    trained: bool = False
    provenance: str = "random"

    def param_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(self.arch, params, self.init_seed, self.trained, self.provenance)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256(self.arch.descriptor().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(arch: ArchSpec, seed: int, provenance: str = "random") -> Model:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn in layer order."""
    shapes = layer_shapes(arch)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    prev = arch.input_shape
    for i, (layer, out) in enumerate(zip(arch.layers, shapes)):
        if layer.kind == "conv2d":
            f, k = layer.args[:2]
            fan_in = prev[0] * k * k
            wshape: tuple[int, ...] = (f, prev[0], k, k)
        elif layer.kind == "dense":
            fan_in = prev[0]
            wshape = (prev[0], layer.args[0])
        else:
            prev = out
            continue
        bound = np.sqrt(6.0 / fan_in)
        params[f"layer{i}.weight"] = Tensor(rng.uniform(-bound, bound, size=wshape), requires_grad=True)
        params[f"layer{i}.bias"] = Tensor(np.zeros(wshape[0] if layer.kind == "conv2d" else wshape[1]),
                                          requires_grad=True)
        prev = out
    return Model(arch, params, int(seed), trained=False, provenance=provenance)


def randomize(model: Model, seed: int) -> Model:
    """A fresh, untrained model of the same architecture."""
    return build_model(model.arch, seed, provenance="random")


def forward(model: Model, x: Tensor, graph: Optional[Graph] = None) -> Tensor:
    """Record the model's forward pass on ``graph`` and return the logits tensor."""
    if x.data.ndim != 4 or x.shape[1:] != model.arch.input_shape:
        raise ShapeError(f"model expects input (N, {', '.join(map(str, model.arch.input_shape))}), got {x.shape}")
    g = graph if graph is not None else Graph()
    h = x
    for i, layer in enumerate(model.arch.layers):
        if layer.kind == "conv2d":
            s = layer.args[2] if len(layer.args) > 2 else 1
            p = layer.args[3] if len(layer.args) > 3 else 0
            h = conv2d(h, model.params[f"layer{i}.weight"], model.params[f"layer{i}.bias"], s, p, graph=g)
        elif layer.kind == "dense":
            h = dense(h, model.params[f"layer{i}.weight"], model.params[f"layer{i}.bias"], graph=g)
        elif layer.kind == "relu":
            h = relu(h, graph=g)
        elif layer.kind == "maxpool":
            h = maxpool2d(h, layer.args[0], layer.args[1] if len(layer.args) > 1 else None, graph=g)
        elif layer.kind == "flatten":
            h = flatten(h, graph=g)
        else:
            raise UnsupportedArchitectureError(f"cannot run layer kind {layer.kind!r}")
    return h


def predict(model: Model, batch, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Logits and argmax labels (ties to the lowest index) for an (N, C, H, W) batch."""
    data = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[1:] != model.arch.input_shape:
        raise ShapeError(f"model expects input (N, {', '.join(map(str, model.arch.input_shape))}), "
                         f"got {data.shape}")
    out = []
    for start in range(0, len(data), chunk):
        out.append(forward(model, Tensor(data[start:start + chunk]), Graph(record=False)).data)
    logits = np.concatenate(out, axis=0)
    return logits, logits.argmax(axis=1)


def save_model(model: Model, path: Union[str, Path]) -> None:
    header = {"arch": model.arch.descriptor(), "init_seed": model.init_seed,
              "trained": model.trained, "provenance": model.provenance}
    container.write_file(path, container.MODEL_TAG, header,
                         [(k, v.data) for k, v in model.params.items()])


def load_model(path: Union[str, Path]) -> Model:
    header, tensors = container.read_file(path, container.MODEL_TAG)
    arch = ArchSpec.from_descriptor(header["arch"])
    reference = build_model(arch, 0)
    for name, t in reference.params.items():
        if name not in tensors:
            raise container.FormatError(f"model file lacks parameter {name!r}")
        if tensors[name].shape != t.shape:
            raise container.LengthError(f"parameter {name!r} has shape {tensors[name].shape}, arch needs {t.shape}")
    params = {name: Tensor(tensors[name], requires_grad=True) for name in reference.params}
    return Model(arch, params, int(header["init_seed"]), bool(header["trained"]), str(header["provenance"]))
