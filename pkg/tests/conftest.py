import numpy as np
import pytest

from pcnn.embedstore import build_store


def toy_store(classes=4, per_class=6, tokens=3, depth=5, seed=0, spread=4.0, noise=0.3):
    """Small well-separated store for unit tests."""
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(classes, depth)) * spread
    records = {"train": [], "test": []}
    grids = {"train": [], "test": []}
    for split in ("train", "test"):
        rid = 0
        for cid in range(classes):
            for _ in range(per_class):
                records[split].append((rid, cid))
                grids[split].append(centroids[cid] + rng.normal(0, noise, size=(tokens, depth)))
                rid += 1
    store = build_store(
        "toy",
        [f"c{i}" for i in range(classes)],
        records,
        {s: np.array(grids[s]) for s in ("train", "test")},
    )
    return store, centroids


@pytest.fixture
def small_store():
    return toy_store()
