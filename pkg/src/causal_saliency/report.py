"""Trained-vs-random saliency comparison over a sample of task images."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .metrics import METRICS, localization_score, similarity
from .model import Model
from .saliency import SaliencyMap, Target, saliency_batch
from .tasks import TaskDataset, ground_truth_mask


@dataclass
class SanityReport:
    task_id: str
    indices: list[int]
    methods: tuple[str, ...]
    records: list[dict] = field(default_factory=list)
    aggregates: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    maps: dict[tuple[str, str], list[SaliencyMap]] = field(default_factory=dict)

    def mean(self, method: str, quantity: str) -> float:
        return self.aggregates[(method, quantity)][0]


def sample_indices(n_total: int, n_images: int, seed: int, pool: Optional[Sequence[int]] = None) -> list[int]:
    candidates = np.arange(n_total) if pool is None else np.asarray(sorted(pool))
    if n_images > len(candidates):
        raise ValueError(f"asked for {n_images} images but only {len(candidates)} are eligible")
    picked = np.random.default_rng(seed).choice(len(candidates), size=n_images, replace=False)
    return [int(i) for i in np.sort(candidates[picked])]


def sanity_check_report(dataset: TaskDataset, trained: Model, random: Model,
                        methods: Sequence[str] = ("VBP", "GBP"), n_images: int = 200, seed: int = 0,
                        target: Union[str, Target] = "predicted", pool: Optional[Sequence[int]] = None,
                        keep_maps: bool = False) -> SanityReport:
    """Compare trained and random-model maps image by image.

    Per image and method: the three similarity metrics between the two maps and
    the localization score of each map against the ground-truth mask. Aggregates
    are (mean, population std) per method and quantity. ``pool`` restricts the
    images that may be sampled.
    """
    target = target if isinstance(target, Target) else Target(target)
    idx = sample_indices(len(dataset), n_images, seed, pool)
    images = dataset.images[idx]
    labels = dataset.labels[idx] if target.rule == "true" else None
    report = SanityReport(dataset.task_id, idx, tuple(methods))
    for method in methods:
        t_maps = saliency_batch(trained, images, method, target, labels)
        r_maps = saliency_batch(random, images, method, target, labels)
        for k, i in enumerate(idx):
            t_maps[k].image_id = r_maps[k].image_id = i
            mask = ground_truth_mask(dataset, i)
            row = {"image": i, "method": method}
            for metric in METRICS:
                row[metric] = similarity(t_maps[k], r_maps[k], metric).value
            row["localization_trained"] = localization_score(t_maps[k], mask)
            row["localization_random"] = localization_score(r_maps[k], mask)
            report.records.append(row)
        if keep_maps:
            report.maps[(method, "trained")] = t_maps
            report.maps[(method, "random")] = r_maps
    for method in methods:
        rows = [r for r in report.records if r["method"] == method]
        for q in (*METRICS, "localization_trained", "localization_random"):
            vals = np.array([r[q] for r in rows])
            report.aggregates[(method, q)] = (float(vals.mean()), float(vals.std()))
    return report
