"""Complexity grouping of training pairs and the easy-to-hard stage plan."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .synthcloud import CorpusManifest, with_annotations


@dataclass
class GroupingResult:
    k: int
    centroids: np.ndarray  # k x 2, original feature units, rows in stage order
    assignment: dict  # sample id -> group number (1 = easiest)
    order: list  # raw cluster index for stage 1, 2, ...
    labels: np.ndarray  # raw cluster index per input point
    inertia_history: list = field(default_factory=list)

    def sizes(self) -> list:
        counts = [0] * self.k
        for g in self.assignment.values():
            counts[g - 1] += 1
        return counts

    def members(self, group: int) -> list:
        return sorted(i for i, g in self.assignment.items() if g == group)


@dataclass
class StagePlan:
    stages: list  # [(group ids tuple, epochs), ...]
    group_sizes: list

    @property
    def total_epochs(self) -> int:
        return sum(e for _, e in self.stages)

    @property
    def k(self) -> int:
        return len(self.stages)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def _inertia(x, centers, labels) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def lloyd(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> tuple:
    """Plain Lloyd iterations from k-means++ seeds. Returns (labels, centers, inertia history)."""
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        new = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        # empty cluster: steal the point farthest from its current centre
        for j in range(k):
            if not np.any(new == j):
                far = np.argmax(((x - centers[new]) ** 2).sum(-1))
                new[far] = j
        history.append(_inertia(x, centers, new))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(_inertia(x, centers, labels))
    return labels, centers, history


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    ids: Optional[Sequence[str]] = None,
    scores: Optional[Sequence[float]] = None,
) -> GroupingResult:
    """Cluster 2-d points (standardised first) and order clusters by mean complexity.

    ``scores`` defaults to the sum of the raw coordinates, i.e. the complexity
    score with unit weights when points are (MSE, 1 - SSIM).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    if k not in (1, 2, 3):
        raise ValueError("k must be 1, 2 or 3")
    if len(pts) < k:
        raise ValueError(f"need at least k={k} points, got {len(pts)}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pts))]
    scores = np.asarray(scores if scores is not None else pts.sum(axis=1), dtype=np.float64)

    std = pts.std(axis=0)
    z = (pts - pts.mean(axis=0)) / np.where(std > 0, std, 1.0)
    labels, _, history = lloyd(z, k, seed, max_iter)

    mean_score = [scores[labels == j].mean() for j in range(k)]
    order = [int(j) for j in np.argsort(mean_score, kind="stable")]
    rank = {raw: pos + 1 for pos, raw in enumerate(order)}
    assignment = {i: rank[int(l)] for i, l in zip(ids, labels)}
    centroids = np.array([pts[labels == j].mean(axis=0) for j in order])
    return GroupingResult(k, centroids, assignment, order, labels, history)


def pair_features(manifest: CorpusManifest, split: str = "train") -> tuple:
    """Return (ids, mse array, ssim array) for every entry of ``split``."""
    ids, mses, ssims = [], [], []
    for e in manifest.split(split):
        cloudy, clean = e.load()
        ids.append(e.id)
        mses.append(metrics.mse(cloudy, clean))
        ssims.append(metrics.ssim(cloudy, clean))
    return ids, np.array(mses), np.array(ssims)


def group_corpus(
    manifest: CorpusManifest,
    k: int = 3,
    seed: int = 0,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    features: Optional[tuple] = None,
) -> tuple:
    """Score and cluster the train split. Returns (annotated manifest, GroupingResult, features)."""
    ids, mses, ssims = features if features is not None else pair_features(manifest)
    if not ids:
        raise ValueError("manifest has no train entries")
    scores = [metrics.score_from_terms(m, s, lambda1, lambda2) for m, s in zip(mses, ssims)]
    points = np.column_stack([mses, 1.0 - ssims])
    result = kmeans(points, k, seed, ids=ids, scores=scores)
    annotated = with_annotations(manifest, dict(zip(ids, scores)), result.assignment)
    return annotated, result, (ids, mses, ssims)


def write_group_report(path, ids, mses, ssims, assignment: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "mse", "one_minus_ssim", "group"])
        for i, m, s in sorted(zip(ids, mses, ssims)):
            w.writerow([i, repr(float(m)), repr(float(1.0 - s)), assignment[i]])


def make_stage_plan(grouping, total_epochs: int) -> StagePlan:
    """Split ``total_epochs`` across groups in proportion to group size.

    Each stage gets floor(total * size / N) epochs (at least one); the last
    stage takes the remainder. ``grouping`` may be a GroupingResult or a list
    of group sizes already in stage order.
    """
    sizes = grouping.sizes() if isinstance(grouping, GroupingResult) else list(grouping)
    k = len(sizes)
    if total_epochs < k:
        raise ValueError(f"total_epochs={total_epochs} is less than the number of stages {k}")
    n = sum(sizes)
    epochs = [max(1, (total_epochs * s) // n) for s in sizes[:-1]]
    epochs.append(total_epochs - sum(epochs))
    while epochs[-1] < 1:
        j = int(np.argmax(epochs[:-1]))
        epochs[j] -= 1
        epochs[-1] += 1
    return StagePlan([((g + 1,), e) for g, e in enumerate(epochs)], sizes)


def ungrouped_plan(total_epochs: int, n: int) -> StagePlan:
    return StagePlan([((1,), total_epochs)], [n])
