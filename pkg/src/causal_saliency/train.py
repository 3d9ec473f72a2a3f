"""Supervised training with softmax cross-entropy, plus evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward, predict
from .tensor import Graph, Tensor, backward, softmax_cross_entropy

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # adam | sgd-momentum
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 10
    target_accuracy: float = 0.99
    eval_interval: int = 1  # epochs between test evaluations
    seed: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_at_target: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd-momentum', got {self.optimizer!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 < self.target_accuracy <= 1:
            raise ValueError("target accuracy must lie in (0, 1]")
        if self.max_epochs < 0 or self.eval_interval < 1:
            raise ValueError("max_epochs must be >= 0 and eval_interval >= 1")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)  # mean loss per epoch
    test_accuracy: list[tuple[int, float]] = field(default_factory=list)  # (epoch, accuracy)
    epochs_run: int = 0
    best_epoch: int = 0
    best_accuracy: float = 0.0
    reached_target: bool = False
    checksum: str = ""

    def records(self) -> list[dict]:
        rows = [{"kind": "train_loss", "epoch": i + 1, "value": v} for i, v in enumerate(self.train_loss)]
        rows += [{"kind": "test_accuracy", "epoch": e, "value": a} for e, a in self.test_accuracy]
        return rows


def _arrays(dataset):
    images = getattr(dataset, "images", None)
    if images is None:
        images = dataset.examples.images
        labels = dataset.examples.labels
    else:
        labels = dataset.labels
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label], max-shifted for stability."""
    return softmax_cross_entropy(logits, labels)


def evaluate(model: Model, dataset) -> float:
    images, labels = _arrays(dataset)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _, pred = predict(model, images)
    return float(np.mean(pred == labels))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model: Model, train_set, test_set, cfg: TrainConfig) -> tuple[Model, TrainReport]:
    """Train a copy of ``model`` and return the best-test-accuracy checkpoint.

    The input model is never mutated. Shuffling is keyed by (cfg.seed, epoch),
    so identical inputs give identical reports and parameters.
    """
    x_train, y_train = _arrays(train_set)
    if len(y_train) == 0:
        raise ValueError("training set is empty")
    if len(_arrays(test_set)[1]) == 0:
        raise ValueError("test set is empty")
    work = model.copy()
    names = list(work.params)
    state = {n: (np.zeros_like(work.params[n].data), np.zeros_like(work.params[n].data)) for n in names}
    step = 0
    report = TrainReport()
    best = work.copy()
    best_acc = -1.0

    for epoch in range(1, cfg.max_epochs + 1):
        order = epoch_order(cfg.seed, epoch, len(y_train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = Graph()
            loss = cross_entropy_loss(forward(work, Tensor(x_train[idx]), g), y_train[idx])
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}; "
                                      f"lower the learning rate (currently {cfg.lr})")
            losses.append(value * len(idx))
            backward(g, loss.node)
            step += 1
            _update(work, names, state, step, cfg)
        report.train_loss.append(float(np.sum(losses) / len(order)))
        report.epochs_run = epoch
        if epoch % cfg.eval_interval == 0 or epoch == cfg.max_epochs:
            acc = evaluate(work, test_set)
            report.test_accuracy.append((epoch, acc))
            logger.info("epoch %d loss %.4f test acc %.4f", epoch, report.train_loss[-1], acc)
            if acc > best_acc:
                best_acc, best = acc, work.copy()
                report.best_epoch = epoch
            if cfg.stop_at_target and acc >= cfg.target_accuracy:
                break

    if best_acc < 0:  # zero epochs
        best_acc = evaluate(work, test_set)
        report.test_accuracy.append((0, best_acc))
    best.trained = True
    best.provenance = getattr(train_set, "task_id", "trained")
    report.best_accuracy = best_acc
    report.reached_target = best_acc >= cfg.target_accuracy
    report.checksum = best.checksum()
    return best, report


def _update(model: Model, names, state, step: int, cfg: TrainConfig) -> None:
    for n in names:
        p = model.params[n]
        if p.grad is None:
            continue
        g = p.grad
        m, v = state[n]
        if cfg.optimizer == "adam":
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** step)
            v_hat = v / (1 - cfg.beta2 ** step)
            p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        else:
            m *= cfg.momentum
            m += g
            p.data = p.data - cfg.lr * m
        p.grad = None
