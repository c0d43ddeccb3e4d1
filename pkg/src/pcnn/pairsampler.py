"""Positive / hard-negative pair construction from classifier predictions.

Per query: Q positives (the Q nearest same-class train records, query
excluded when it lives in the train split) and one negative per
non-ground-truth class — top-Q classes in hard mode, uniformly random other
classes in random mode. With the ground truth inside the top-Q this yields
2Q-1 pairs, otherwise 2Q.

Evaluation sets additionally drop pairs whose grids are bitwise identical
and are trimmed (seeded) to an exact 50/50 label balance.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .classifier import top_q
from .nnindex import InsufficientCandidatesError

POSITIVE = 1
NEGATIVE = 0


@dataclass
class SamplerConfig:
    q: int = 10
    nn_rank: int = 1
    negative_mode: str = "hard_topQ"  # or "random_class"
    seed: int = 42

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("Q must be >= 2")
        if self.nn_rank < 1:
            raise ValueError("nn_rank must be >= 1")
        if self.negative_mode not in ("hard_topQ", "random_class"):
            raise ValueError(f"unknown negative_mode {self.negative_mode!r}")


@dataclass
class PairSample:
    query_id: int
    neighbor_id: int
    label: int
    source_class: int
    nn_rank: int


@dataclass
class PairSet:
    split: str
    config: SamplerConfig
    pairs: list
    gt_in_topq: dict = field(default_factory=dict)  # query id -> bool

    def __len__(self):
        return len(self.pairs)

    def positives(self):
        return [p for p in self.pairs if p.label == POSITIVE]

    def negatives(self):
        return [p for p in self.pairs if p.label == NEGATIVE]


def _pairs_for_query(store, index, output, config, split, qid, num_classes):
    gt = store.class_of(split, qid)
    pooled = store.pooled(split, qid)
    pred = top_q(output.row(qid), config.q)
    in_topq = gt in pred.classes

    exclude = {qid} if split == "train" else ()
    try:
        pos_neighbors = index.nearest_k_in_class(pooled, gt, config.q, exclude=exclude)
    except InsufficientCandidatesError as exc:
        raise InsufficientCandidatesError(
            f"class {gt} too small for {config.q} positives: {exc}"
        ) from exc
    pairs = [
        PairSample(qid, nid, POSITIVE, gt, rank)
        for rank, (nid, _) in enumerate(pos_neighbors, start=1)
    ]

    if config.negative_mode == "hard_topQ":
        neg_classes = [int(c) for c in pred.classes if c != gt]
    else:
        want = config.q - 1 if in_topq else config.q
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, qid]))
        others = np.array([c for c in range(num_classes) if c != gt])
        neg_classes = [int(c) for c in rng.choice(others, size=want, replace=False)]

    for cid in neg_classes:
        try:
            nid, _ = index.nearest_in_class(pooled, cid, rank=config.nn_rank, exclude=())
        except InsufficientCandidatesError as exc:
            raise InsufficientCandidatesError(
                f"class {cid} too small for negative at rank {config.nn_rank}: {exc}"
            ) from exc
        pairs.append(PairSample(qid, nid, NEGATIVE, cid, config.nn_rank))
    return pairs, in_topq


def _sample(store, output, index, config, split):
    num_classes = store.manifest.num_classes
    pairs = []
    gt_flags = {}
    for qid in store.ids(split):
        qpairs, in_topq = _pairs_for_query(
            store, index, output, config, split, qid, num_classes
        )
        pairs.extend(qpairs)
        gt_flags[qid] = in_topq
    return PairSet(split, config, pairs, gt_flags)


def sample_train(store, output, index, config):
    return _sample(store, output, index, config, "train")


def sample_eval(store, output, index, config):
    """Test-split sampling with identical-grid dedup and exact 50/50 balance."""
    pairset = _sample(store, output, index, config, "test")
    kept = []
    for p in pairset.pairs:
        qg = store.grid("test", p.query_id)
        ng = store.grid("train", p.neighbor_id)
        if qg.shape == ng.shape and np.array_equal(qg, ng):
            continue
        kept.append(p)
    pos = [p for p in kept if p.label == POSITIVE]
    neg = [p for p in kept if p.label == NEGATIVE]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA1A]))
    target = min(len(pos), len(neg))
    # the construction can leave either side in excess; trim the larger one
    for side in (pos, neg):
        if len(side) > target:
            drop = set(rng.choice(len(side), size=len(side) - target, replace=False))
            side[:] = [p for i, p in enumerate(side) if i not in drop]
    balanced = pos + neg
    order = {id(p): i for i, p in enumerate(pairset.pairs)}
    balanced.sort(key=lambda p: order[id(p)])
    return PairSet("test", config, balanced, pairset.gt_in_topq)


@dataclass
class AuditReport:
    expected: int
    actual: int
    violations: list

    @property
    def ok(self):
        return not self.violations and self.expected == self.actual


def pair_count_audit(pairset, query_ids, q):
    """Check total pairs == sum over queries of (2Q-1 if gt in top-Q else 2Q)."""
    per_query = {}
    for p in pairset.pairs:
        per_query[p.query_id] = per_query.get(p.query_id, 0) + 1
    expected = 0
    violations = []
    for qid in query_ids:
        want = 2 * q - 1 if pairset.gt_in_topq.get(qid, False) else 2 * q
        expected += want
        got = per_query.get(qid, 0)
        if got != want:
            violations.append({"query": int(qid), "expected": want, "actual": got})
    return AuditReport(expected=expected, actual=len(pairset.pairs), violations=violations)


# --------------------------------------------------------------- jsonl io


def save_pairs(pairset, path):
    with open(path, "w") as fh:
        header = {
            "split": pairset.split,
            "q": pairset.config.q,
            "nn_rank": pairset.config.nn_rank,
            "negative_mode": pairset.config.negative_mode,
            "seed": pairset.config.seed,
            "gt_in_topq": {str(k): bool(v) for k, v in pairset.gt_in_topq.items()},
        }
        fh.write(json.dumps(header) + "\n")
        for p in pairset.pairs:
            fh.write(
                json.dumps(
                    [p.query_id, p.neighbor_id, p.label, p.source_class, p.nn_rank]
                )
                + "\n"
            )


def load_pairs(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        pairs = [PairSample(*json.loads(line)) for line in fh if line.strip()]
    config = SamplerConfig(
        q=header["q"],
        nn_rank=header["nn_rank"],
        negative_mode=header["negative_mode"],
        seed=header["seed"],
    )
    flags = {int(k): v for k, v in header["gt_in_topq"].items()}
    return PairSet(header["split"], config, pairs, flags)
