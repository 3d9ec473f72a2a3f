"""Vanilla and guided backpropagation saliency maps."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .model import Model, check_relu_only, forward
from .tensor import Graph, ReluRule, ShapeError, Tensor, backward

METHODS = ("VBP", "GBP")
NORMALIZATIONS = ("none", "abs-maxnorm", "signed-maxnorm")


@dataclass(frozen=True)
class Target:
    """Which logit to differentiate: ``max`` logit, ``predicted`` class, ``true`` label or ``explicit`` class."""
    rule: str = "max"
    index: Optional[int] = None

    def __post_init__(self):
        if self.rule not in ("max", "predicted", "true", "explicit"):
            raise ValueError(f"unknown target rule {self.rule!r}")
        if self.rule == "explicit" and self.index is None:
            raise ValueError("the explicit target rule needs a class index")


@dataclass
class SaliencyMap:
    values: np.ndarray  # (1, C, H, W), raw signed unless normalized
    method: str
    target: Target
    target_class: int
    provenance: str = ""
    normalization: str = "none"
    image_id: Optional[int] = None
    logits: Optional[np.ndarray] = None

    @property
    def gray(self) -> np.ndarray:
        """(H, W) reduction: max over channels of |value|."""
        return np.abs(self.values[0]).max(axis=0)


def select_target(logits, rule: Union[str, Target] = "max", true_label: Optional[int] = None) -> int:
    target = rule if isinstance(rule, Target) else Target(rule)
    logits = np.asarray(logits).reshape(-1)
    if target.rule in ("max", "predicted"):
        return int(np.argmax(logits))  # first maximal index
    if target.rule == "true":
        if true_label is None:
            raise ValueError("the true-label target rule needs a label")
        return int(true_label)
    return int(target.index)


def _saliency_batch(model: Model, x: np.ndarray, method: str, target: Target,
                    true_labels: Optional[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "GBP":
        check_relu_only(model.arch.layers)
    if x.ndim != 4 or x.shape[1:] != model.arch.input_shape:
        raise ShapeError(f"model expects input (N, {', '.join(map(str, model.arch.input_shape))}), got {x.shape}")
    k = model.arch.num_classes
    g = Graph()
    inp = Tensor(x, requires_grad=True)
    logits = forward(model, inp, g)
    classes = np.array([
        select_target(row, target, None if true_labels is None else true_labels[i])
        for i, row in enumerate(logits.data)])
    if (classes < 0).any() or (classes >= k).any():
        raise ValueError(f"target class out of range [0, {k}): {classes}")
    seed = np.zeros_like(logits.data)
    seed[np.arange(len(classes)), classes] = 1.0
    rule = ReluRule.GUIDED if method == "GBP" else ReluRule.VANILLA
    backward(g, logits.node, seed, rule)
    values = inp.grad if inp.grad is not None else np.zeros_like(x)
    return values, logits.data, classes


def saliency(model: Model, x, method: str = "VBP", target: Union[str, Target] = "max",
             true_label: Optional[int] = None) -> SaliencyMap:
    target = target if isinstance(target, Target) else Target(target)
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.shape[0] != 1:
        raise ShapeError(f"saliency takes one image; use saliency_batch for {data.shape[0]}")
    values, logits, classes = _saliency_batch(model, data, method, target,
                                              None if true_label is None else [true_label])
    return SaliencyMap(values, method, target, int(classes[0]), model.provenance, logits=logits[0].copy())


def vbp(model: Model, x, target: Union[str, Target] = "max", true_label: Optional[int] = None) -> SaliencyMap:
    """Gradient of the selected logit with respect to the input image."""
    return saliency(model, x, "VBP", target, true_label)


def gbp(model: Model, x, target: Union[str, Target] = "max", true_label: Optional[int] = None) -> SaliencyMap:
    """As :func:`vbp`, but ReLUs also block negative upstream gradients."""
    return saliency(model, x, "GBP", target, true_label)


def saliency_batch(model: Model, images, method: str = "VBP", target: Union[str, Target] = "max",
                   true_labels: Optional[Sequence[int]] = None, chunk: int = 64) -> list[SaliencyMap]:
    """Maps for many images at once. Examples never interact in the forward pass,
    so the per-row input gradient of a one-hot-seeded batch is each image's map."""
    target = target if isinstance(target, Target) else Target(target)
    data = np.asarray(images, dtype=np.float64)
    maps = []
    for start in range(0, len(data), chunk):
        labels = None if true_labels is None else list(true_labels[start:start + chunk])
        values, logits, classes = _saliency_batch(model, data[start:start + chunk], method, target, labels)
        maps.extend(SaliencyMap(values[i:i + 1].copy(), method, target, int(classes[i]), model.provenance,
                                logits=logits[i].copy())
                    for i in range(len(classes)))
    return maps


def normalize_map(smap: SaliencyMap, mode: str = "abs-maxnorm") -> SaliencyMap:
    if mode not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")
    v = smap.values
    if mode == "none":
        return replace(smap, values=v.copy(), normalization=mode)
    peak = np.abs(v).max()
    if mode == "abs-maxnorm":
        v = np.abs(v)
    out = v / peak if peak > 0 else np.zeros_like(v)
    return replace(smap, values=out, normalization=mode)
