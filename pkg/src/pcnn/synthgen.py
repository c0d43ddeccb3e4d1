"""Synthetic dataset generation for desk-scale experiments.

Class centroids are grouped: group centers sit far apart, centroids within
a group sit just above the requested separation. That makes some class
pairs genuinely confusable (hard negatives differ from random ones) while
keeping every pairwise centroid distance >= s.
"""

from dataclasses import dataclass

import numpy as np

from .embedstore import build_store


@dataclass
class SyntheticSpec:
    classes: int = 20
    train_per_class: int = 30
    test_per_class: int = 30
    depth: int = 64
    tokens: int = 4
    separation: float = 1.0
    group_spread: float = 8.0  # group-center distance as a multiple of separation
    groups: int = 5
    token_noise: float = 0.35
    tau: float = 2.5
    corruption_rate: float = 0.3
    corruption_q: int = 2  # swap partner drawn from the top-Q of this Q

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.groups < 1 or self.groups > self.classes:
            raise ValueError("groups must be in 1..classes")
        if self.separation <= 0:
            raise ValueError("separation must be positive")


def _spread_points(rng, n, d, min_dist):
    """Random directions rescaled so the closest pair sits at min_dist."""
    pts = rng.normal(size=(n, d))
    if n == 1:
        return pts
    dmin = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            dmin = min(dmin, float(np.linalg.norm(pts[i] - pts[j])))
    return pts * (min_dist / dmin)


def make_centroids(spec, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCE27]))
    group_centers = _spread_points(
        rng, spec.groups, spec.depth, spec.separation * spec.group_spread
    )
    sizes = [len(a) for a in np.array_split(np.arange(spec.classes), spec.groups)]
    centroids = np.empty((spec.classes, spec.depth))
    k = 0
    for g, size in enumerate(sizes):
        offsets = _spread_points(rng, size, spec.depth, spec.separation * 1.2)
        centroids[k : k + size] = group_centers[g] + offsets
        k += size
    # enforce the global guarantee: min pairwise distance >= separation
    dmin = np.inf
    for i in range(spec.classes):
        for j in range(i + 1, spec.classes):
            dmin = min(dmin, float(np.linalg.norm(centroids[i] - centroids[j])))
    if dmin < spec.separation:
        centroids *= spec.separation / dmin
    return centroids


def synth_gen(spec, seed):
    """Build (store, centroids) deterministically from (spec, seed)."""
    centroids = make_centroids(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    records = {"train": [], "test": []}
    grids = {"train": [], "test": []}
    rid = 0
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        rid = 0
        for cid in range(spec.classes):
            for _ in range(per_class):
                grid = centroids[cid] + rng.normal(
                    0, spec.token_noise, size=(spec.tokens, spec.depth)
                )
                records[split].append((rid, cid))
                grids[split].append(grid)
                rid += 1
    store = build_store(
        dataset="synthetic",
        class_names=[f"class_{i:03d}" for i in range(spec.classes)],
        records=records,
        grids_by_split={
            s: np.array(grids[s]) if grids[s] else np.empty((0, spec.tokens, spec.depth))
            for s in ("train", "test")
        },
    )
    return store, centroids
