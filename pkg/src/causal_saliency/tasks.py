"""Image ingestion and the semi-synthetic tasks built on top of it.

Every generated example draws from its own RNG stream keyed by
``(seed, index)``, so datasets are reproducible and examples are independent
of how many others are generated.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import container

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SUPPORT_THRESHOLD = 0.1

SHAPE_CLASSES = ("none", "rectangle", "circle")
TINY_IMAGENET_GROUP_A = ("acorn", "espresso", "banana", "ice cream", "gondola")
TINY_IMAGENET_GROUP_B = ("wok", "cauliflower", "space heater", "pay-phone", "baboon")


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class MaskUnavailableError(LookupError):
    pass


class ImpossibleObservationError(ValueError):
    """The observation has zero likelihood under every task in the family."""


@dataclass
class ImageSet:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    source: str = ""
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"images must be a nonempty (N, C, H, W) array, got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ValueError(f"{len(self.images)} images but labels have shape {self.labels.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "ImageSet":
        return ImageSet(self.images[index], self.labels[index], self.source, self.num_classes)


@dataclass
class TaskDataset:
    examples: ImageSet
    task_id: str
    class_names: tuple[str, ...]
    masks: Optional[np.ndarray] = None  # (N, 1, H, W) of {0, 1}
    gen_meta: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def images(self) -> np.ndarray:
        return self.examples.images

    @property
    def labels(self) -> np.ndarray:
        return self.examples.labels

    def subset(self, index) -> "TaskDataset":
        index = np.asarray(index)
        idx = np.arange(len(self))[index]
        return TaskDataset(self.examples.subset(idx), self.task_id, self.class_names,
                           None if self.masks is None else self.masks[idx],
                           [self.gen_meta[i] for i in idx] if self.gen_meta else [])


# --------------------------------------------------------------------------
# Ingestion
# --------------------------------------------------------------------------

def _read_bytes(path: Union[str, Path]) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _idx_header(buf: bytes, expected_magic: int, ndim: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise IdxTruncatedError(f"{what} file shorter than its magic number")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{what} file has magic {magic:#010x}, expected {expected_magic:#010x}")
    if len(buf) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{what} header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    if len(buf) < 4 + 4 * ndim + int(np.prod(dims)):
        raise IdxTruncatedError(f"{what} payload truncated: header promises {int(np.prod(dims))} bytes, "
                                f"file holds {len(buf) - 4 - 4 * ndim}")
    return dims


def load_idx(images_path, labels_path) -> ImageSet:
    """Read an IDX image/label file pair (optionally gzipped); pixels are scaled by 1/255."""
    ibuf, lbuf = _read_bytes(images_path), _read_bytes(labels_path)
    n, h, w = _idx_header(ibuf, IDX_IMAGES_MAGIC, 3, "images")
    (m,) = _idx_header(lbuf, IDX_LABELS_MAGIC, 1, "labels")
    if n != m:
        raise IdxCountMismatchError(f"images file holds {n} items but labels file holds {m}")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * h * w, offset=16)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=8)
    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return ImageSet(images, labels.astype(np.int64), source=f"idx:{Path(images_path).name}",
                    num_classes=max(10, int(labels.max()) + 1))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_bundled_mnist() -> ImageSet:
    """The 5000-image MNIST sample (500 per digit) that ships with mlxtend."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return ImageSet(x.reshape(-1, 1, 28, 28) / 255.0, y, source="mlxtend:mnist_5k", num_classes=10)


def train_test_split(images: ImageSet, n_test: int, seed: int) -> tuple[ImageSet, ImageSet]:
    if not 0 < n_test < len(images):
        raise ValueError(f"n_test must be in (0, {len(images)})")
    order = np.random.default_rng(seed).permutation(len(images))
    return images.subset(np.sort(order[n_test:])), images.subset(np.sort(order[:n_test]))


def upscale(images: ImageSet, size: int) -> ImageSet:
    """Bilinear resize of every image to ``size`` x ``size``."""
    from scipy.ndimage import zoom

    n, c, h, w = images.images.shape
    out = zoom(images.images, (1, 1, size / h, size / w), order=1, grid_mode=True, mode="nearest")
    return ImageSet(np.clip(out, 0.0, 1.0), images.labels, f"{images.source}@{size}", images.num_classes)


def load_class_folders(root, class_names: Sequence[str], size: int = 64) -> ImageSet:
    """RGB images from ``root/<class name>/*`` with labels in ``class_names`` order."""
    from PIL import Image

    images, labels = [], []
    for label, name in enumerate(class_names):
        folder = Path(root) / name
        files = sorted(p for p in folder.iterdir() if p.is_file()) if folder.is_dir() else []
        if not files:
            raise FileNotFoundError(f"no images for class {name!r} under {folder}")
        for p in files:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float64)
            images.append(arr.transpose(2, 0, 1) / 255.0)
            labels.append(label)
    return ImageSet(np.stack(images), np.array(labels), f"folders:{root}", len(class_names))


def split_by_class(images: ImageSet, group_a: Sequence[int], group_b: Sequence[int]) -> tuple[ImageSet, ImageSet]:
    """Two disjoint groups; labels are re-indexed 0..len(group)-1 in the given order."""
    if set(group_a) & set(group_b):
        raise ValueError("class groups must be disjoint")
    out = []
    for group in (group_a, group_b):
        lookup = {c: i for i, c in enumerate(group)}
        keep = np.isin(images.labels, list(group))
        labels = np.array([lookup[c] for c in images.labels[keep]])
        out.append(ImageSet(images.images[keep], labels, images.source, len(group)))
    return out[0], out[1]


# --------------------------------------------------------------------------
# Task generation
# --------------------------------------------------------------------------

def digit_support(image: np.ndarray) -> np.ndarray:
    """Pixels above the support threshold in any channel, as a (1, H, W) {0,1} mask.

    A blank image yields the full frame so that masks are never empty.
    """
    mask = (np.asarray(image).max(axis=0, keepdims=True) > SUPPORT_THRESHOLD).astype(np.float64)
    return mask if mask.any() else np.ones_like(mask)


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_half_deletion_task(base: ImageSet, p_perturb: float = 0.5, seed: int = 0) -> TaskDataset:
    """Zero the bottom half of each image with probability ``p_perturb``.

    Label 1 marks a perturbed image. Its mask is the deleted region; an
    unperturbed image's mask is the digit support.
    """
    n, c, h, w = base.images.shape
    if h % 2:
        raise ValueError(f"half deletion needs an even image height, got {h}")
    if not 0 <= p_perturb <= 1:
        raise ValueError("p_perturb must be a probability")
    images = base.images.copy()
    labels = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, 1, h, w))
    meta = []
    for i in range(n):
        draw = float(_stream(seed, i).random())
        perturbed = draw < p_perturb
        if perturbed:
            images[i, :, h // 2:, :] = 0.0
            masks[i, :, h // 2:, :] = 1.0
            labels[i] = 1
        else:
            masks[i] = digit_support(images[i])
        meta.append({"kind": "half_deletion", "perturbed": bool(perturbed), "draw": draw,
                     "source_index": i, "source_label": int(base.labels[i])})
    return TaskDataset(ImageSet(images, labels, base.source, 2), "half_deletion",
                       ("unperturbed", "perturbed"), masks, meta)


def rectangle_pixels(h: int, w: int, top: int, left: int, height: int, width: int) -> np.ndarray:
    mask = np.zeros((h, w))
    mask[top:top + height, left:left + width] = 1.0
    return mask


def circle_pixels(h: int, w: int, cy: int, cx: int, radius: int) -> np.ndarray:
    """One-pixel-wide ring: pixels whose centre lies within 0.5 of the radius."""
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return (np.abs(dist - radius) <= 0.5).astype(np.float64)


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _draw_shape(rng: np.random.Generator, kind: str, h: int, w: int) -> tuple[np.ndarray, dict]:
    if kind == "rectangle":
        height, width = (int(v) for v in rng.integers(6, 13, size=2))
        top = int(rng.integers(0, h - height + 1))
        left = int(rng.integers(0, w - width + 1))
        return rectangle_pixels(h, w, top, left, height, width), {
            "top": top, "left": left, "height": height, "width": width}
    radius = int(rng.integers(4, 9))
    cy = int(rng.integers(radius, h - radius))
    cx = int(rng.integers(radius, w - radius))
    return circle_pixels(h, w, cy, cx, radius), {"cy": cy, "cx": cx, "radius": radius}


def make_shape_augment_task(base: ImageSet, target: str = "shape", seed: int = 0,
                            max_overlap: float = 0.25, max_tries: int = 20) -> TaskDataset:
    """Add a rectangle, an empty circle, or nothing to each image.

    ``target="shape"`` labels the modification (0 none, 1 rectangle, 2 circle)
    and masks the shape pixels; ``target="digit"`` keeps the digit label and
    masks the digit. The generative stream does not depend on ``target``.
    """
    if target not in ("shape", "digit"):
        raise ValueError(f"target must be 'shape' or 'digit', got {target!r}")
    n, c, h, w = base.images.shape
    images = base.images.copy()
    masks = np.zeros((n, 1, h, w))
    labels = np.zeros(n, dtype=np.int64)
    meta = []
    for i in range(n):
        rng = _stream(seed, i)
        kind = SHAPE_CLASSES[int(rng.integers(3))]
        support = digit_support(base.images[i])[0]
        record: dict = {"kind": kind, "source_index": i, "digit": int(base.labels[i])}
        shape = None
        if kind != "none":
            y0, y1, x0, x1 = _bbox(support)
            box = np.zeros((h, w))
            box[y0:y1, x0:x1] = 1.0
            for attempt in range(1, max_tries + 1):
                shape, geometry = _draw_shape(rng, kind, h, w)
                overlap = float((shape * box).sum() / shape.sum())
                if overlap <= max_overlap:
                    break
            record.update(geometry=geometry, overlap=overlap, tries=attempt,
                          accepted=overlap <= max_overlap, area=int(shape.sum()))
            images[i] = np.where(shape[None] > 0, 1.0, images[i])
        if target == "shape":
            labels[i] = SHAPE_CLASSES.index(kind)
            masks[i, 0] = shape if shape is not None else support
        else:
            labels[i] = base.labels[i]
            masks[i, 0] = support
        meta.append(record)
    if target == "shape":
        return TaskDataset(ImageSet(images, labels, base.source, 3), "shape_augment/shape",
                           SHAPE_CLASSES, masks, meta)
    return TaskDataset(ImageSet(images, labels, base.source, base.num_classes), "shape_augment/digit",
                       tuple(str(d) for d in range(base.num_classes)), masks, meta)


def make_pair_task(group_a: ImageSet, group_b: ImageSet, n_examples: int, seed: int = 0,
                   class_names: Optional[Sequence[str]] = None,
                   force_side: Optional[str] = None) -> TaskDataset:
    """Place one image from each group side by side; the label is the group-A class.

    ``gen_meta`` records both source indices and which side holds the A image.
    ``force_side`` ("left" or "right") pins the A image's side.
    """
    if group_a.images.shape[1:] != group_b.images.shape[1:]:
        raise ValueError(f"group image shapes differ: {group_a.images.shape[1:]} vs {group_b.images.shape[1:]}")
    if force_side not in (None, "left", "right"):
        raise ValueError("force_side must be None, 'left' or 'right'")
    c, h, w = group_a.images.shape[1:]
    images = np.zeros((n_examples, c, h, 2 * w))
    masks = np.zeros((n_examples, 1, h, 2 * w))
    labels = np.zeros(n_examples, dtype=np.int64)
    meta = []
    for i in range(n_examples):
        rng = _stream(seed, i)
        a = int(rng.integers(len(group_a)))
        b = int(rng.integers(len(group_b)))
        side = ("left", "right")[int(rng.integers(2))] if force_side is None else force_side
        a_cols = slice(0, w) if side == "left" else slice(w, 2 * w)
        b_cols = slice(w, 2 * w) if side == "left" else slice(0, w)
        images[i, :, :, a_cols] = group_a.images[a]
        images[i, :, :, b_cols] = group_b.images[b]
        masks[i, :, :, a_cols] = 1.0
        labels[i] = group_a.labels[a]
        meta.append({"kind": "pair", "a_index": a, "b_index": b, "side": side,
                     "b_label": int(group_b.labels[b])})
    names = tuple(class_names) if class_names else tuple(str(k) for k in range(group_a.num_classes))
    return TaskDataset(ImageSet(images, labels, f"pair({group_a.source})", group_a.num_classes),
                       "pair", names, masks, meta)


def concat_tasks(datasets: Sequence[TaskDataset]) -> TaskDataset:
    """Stack several draws of the same task, e.g. fresh perturbations of one base set."""
    first = datasets[0]
    for d in datasets[1:]:
        if d.task_id != first.task_id or d.images.shape[1:] != first.images.shape[1:]:
            raise ValueError("only draws of the same task with equal image shapes can be stacked")
    has_masks = all(d.masks is not None for d in datasets)
    examples = ImageSet(np.concatenate([d.images for d in datasets]),
                        np.concatenate([d.labels for d in datasets]),
                        first.examples.source, first.examples.num_classes)
    return TaskDataset(examples, first.task_id, first.class_names,
                       np.concatenate([d.masks for d in datasets]) if has_masks else None,
                       [m for d in datasets for m in d.gen_meta])


def ground_truth_mask(dataset: TaskDataset, index: int) -> np.ndarray:
    if dataset.masks is None:
        raise MaskUnavailableError(f"dataset {dataset.task_id!r} carries no ground-truth masks")
    if not -len(dataset) <= index < len(dataset):
        raise IndexError(f"index {index} out of range for {len(dataset)} examples")
    mask = dataset.masks[index]
    if not mask.any():
        raise MaskUnavailableError(f"example {index} has an empty mask")
    return mask


# --------------------------------------------------------------------------
# Task posterior
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskPosterior:
    tasks: tuple[str, ...]
    probs: tuple[float, ...]
    priors: tuple[float, ...]

    def __post_init__(self):
        if len(self.tasks) != len(self.probs) or len(self.tasks) != len(self.priors):
            raise ValueError("tasks, probs and priors must have equal length")
        p = np.asarray(self.probs)
        if (p < 0).any() or abs(p.sum() - 1) > 1e-12:
            raise ValueError(f"posterior must be a probability vector, got {self.probs}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.tasks, self.probs))


def structural_likelihood(task: str, evidence: str, p_perturb: float = 0.5) -> float:
    """Likelihood of an evidence class under ``task``, up to the shared base density.

    Evidence classes: ``clean`` (an untouched base image), ``bottom_deleted``,
    ``rectangle``, ``circle`` and ``pair``.
    """
    table = {
        "mnist": {"clean": 1.0},
        "half_deletion": {"clean": 1.0 - p_perturb, "bottom_deleted": p_perturb},
        "shape_augment/shape": {"clean": 1 / 3, "rectangle": 1 / 3, "circle": 1 / 3},
        "shape_augment/digit": {"clean": 1 / 3, "rectangle": 1 / 3, "circle": 1 / 3},
        "pair": {"pair": 1.0},
    }
    if task not in table:
        raise KeyError(f"unknown task {task!r}; structural likelihoods exist for {sorted(table)}")
    return table[task].get(evidence, 0.0)


def evidence_class(x) -> str:
    """Classify ``x`` (a gen_meta record or a raw (C, H, W) image) into an evidence class."""
    if isinstance(x, dict):
        kind = x.get("kind")
        if kind == "half_deletion":
            return "bottom_deleted" if x["perturbed"] else "clean"
        if kind in ("none", "rectangle", "circle"):
            return "clean" if kind == "none" else kind
        if kind == "pair":
            return "pair"
        raise ValueError(f"cannot derive evidence from metadata {x!r}")
    img = np.asarray(x, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    h = img.shape[1]
    if not img[:, h // 2:, :].any() and img[:, :h // 2, :].any():
        return "bottom_deleted"
    return "clean"


def task_posterior(x, family: Sequence[str], priors: Optional[Sequence[float]] = None,
                   p_perturb: float = 0.5) -> TaskPosterior:
    """Pr(T = t | X = x) over ``family`` from priors and structural likelihood ratios."""
    family = tuple(family)
    if not family:
        raise ValueError("task family is empty")
    prior = np.full(len(family), 1.0 / len(family)) if priors is None else np.asarray(priors, dtype=np.float64)
    if prior.shape != (len(family),) or (prior < 0).any() or prior.sum() <= 0:
        raise ValueError(f"priors must be {len(family)} non-negative weights with positive sum")
    prior = prior / prior.sum()
    evidence = evidence_class(x)
    joint = prior * np.array([structural_likelihood(t, evidence, p_perturb) for t in family])
    total = joint.sum()
    if total <= 0:
        raise ImpossibleObservationError(f"evidence {evidence!r} is impossible under every task in {family}")
    return TaskPosterior(family, tuple(float(v) for v in joint / total), tuple(float(v) for v in prior))


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_dataset(dataset: TaskDataset, path) -> None:
    header = {"task_id": dataset.task_id, "class_names": list(dataset.class_names),
              "source": dataset.examples.source, "num_classes": dataset.examples.num_classes,
              "gen_meta": dataset.gen_meta}
    tensors = [("images", dataset.images), ("labels", dataset.labels.astype(np.float64))]
    if dataset.masks is not None:
        tensors.append(("masks", dataset.masks))
    container.write_file(path, container.DATASET_TAG, header, tensors)


def load_dataset(path) -> TaskDataset:
    header, tensors = container.read_file(path, container.DATASET_TAG)
    examples = ImageSet(tensors["images"], tensors["labels"].astype(np.int64), header["source"],
                        header["num_classes"])
    return TaskDataset(examples, header["task_id"], tuple(header["class_names"]),
                       tensors.get("masks"), header["gen_meta"])
