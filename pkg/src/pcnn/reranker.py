"""Probable-class nearest-neighbor re-ranking.

For each query: take the classifier's top-K classes, retrieve the nearest
in-class training records, score each pair with the comparator, and re-rank
either by probability x score (soft, product of experts) or by score alone
(hard). Also: kNN baselines, sanity checks, and the top-Q ceiling table.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .classifier import top_q
from .nnindex import InsufficientCandidatesError

SKIPPED = None  # marker for below-floor classes in the trace


@dataclass
class RerankConfig:
    k: int = 10
    n_neighbors: int = 1
    mode: str = "soft"  # or "hard"
    prob_floor: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 <= self.prob_floor < 1:
            raise ValueError("probability floor must be in [0, 1)")


@dataclass
class ClassEntry:
    class_id: int
    prob: float
    neighbor_ids: list
    s_score: float  # None when skipped
    final: float  # -inf when skipped


@dataclass
class RankedResult:
    query_id: int
    entries: list  # ClassEntry per top-K class, classifier order
    predicted: int
    comparator_queries: int

    def to_json_obj(self):
        return {
            "query": int(self.query_id),
            "predicted": int(self.predicted),
            "comparator_queries": self.comparator_queries,
            "classes": [
                {
                    "class": int(e.class_id),
                    "prob": e.prob,
                    "neighbors": [int(n) for n in e.neighbor_ids],
                    "s_score": e.s_score,
                    "final": None if e.s_score is None else e.final,
                }
                for e in self.entries
            ],
        }


# ------------------------------------------------------------- scorers


class ModelScorer:
    """Scores pairs with a trained comparator, batched."""

    def __init__(self, model, batch_size=256):
        self.model = model
        self.batch_size = batch_size

    def score(self, grids1, grids2, meta=None):
        out = np.empty(len(grids1))
        for start in range(0, len(grids1), self.batch_size):
            out[start : start + self.batch_size] = self.model.score_pairs(
                grids1[start : start + self.batch_size],
                grids2[start : start + self.batch_size],
            )
        return out


class OracleScorer:
    """Ground-truth comparator: 1 iff the pair shares a class."""

    def __init__(self, store, query_split="test"):
        self.store = store
        self.query_split = query_split

    def score(self, grids1, grids2, meta):
        out = np.empty(len(meta))
        for i, (qid, nid) in enumerate(meta):
            same = self.store.class_of(self.query_split, qid) == self.store.class_of(
                "train", nid
            )
            out[i] = 1.0 if same else 0.0
        return out


class CosineScorer:
    """Cosine similarity of pooled vectors, mapped from [-1, 1] to [0, 1]."""

    def score(self, grids1, grids2, meta=None):
        a = grids1.mean(axis=1)
        b = grids2.mean(axis=1)
        num = np.einsum("ij,ij->i", a, b)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        cos = np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)
        return 0.5 * (cos + 1.0)


# ------------------------------------------------------------- re-rank


def _candidates(store, index, query_split, qid, probs, cfg):
    """Top-K entries with retrieved neighbors; s scores filled in later."""
    pred = top_q(probs, min(cfg.k, len(probs)))
    pooled = store.pooled(query_split, qid)
    exclude = {qid} if query_split == "train" else ()
    entries = []
    for cid, p in zip(pred.classes, pred.probs):
        if cfg.prob_floor > 0 and p < cfg.prob_floor:
            entries.append(ClassEntry(int(cid), float(p), [], None, -np.inf))
            continue
        neigh = index.nearest_k_in_class(pooled, int(cid), cfg.n_neighbors, exclude=exclude)
        entries.append(
            ClassEntry(int(cid), float(p), [nid for nid, _ in neigh], None, -np.inf)
        )
    return entries


def _finalize(entries, scores_by_pair, store, qid, cfg):
    count = 0
    for e in entries:
        if not e.neighbor_ids:
            continue
        vals = [scores_by_pair[(qid, nid, e.class_id)] for nid in e.neighbor_ids]
        count += len(vals)
        e.s_score = float(np.mean(vals))
        e.final = e.prob * e.s_score if cfg.mode == "soft" else e.s_score
    # argmax with tie-break: final, then original C probability, then low id
    best = max(entries, key=lambda e: (e.final, e.prob, -e.class_id))
    return RankedResult(qid, entries, best.class_id, count)


def rerank_split(store, output, index, scorer, cfg, query_split="test"):
    """Re-rank every query of a split; one batched comparator pass."""
    per_query = {}
    pair_meta = []
    g1, g2 = [], []
    for qid in store.ids(query_split):
        entries = _candidates(store, index, query_split, qid, output.row(qid), cfg)
        per_query[qid] = entries
        for e in entries:
            for nid in e.neighbor_ids:
                pair_meta.append((qid, nid, e.class_id))
                g1.append(store.grid(query_split, qid))
                g2.append(store.grid("train", nid))
    scores_by_pair = {}
    if pair_meta:
        scores = scorer.score(
            np.stack(g1), np.stack(g2), [(q, n) for q, n, _ in pair_meta]
        )
        scores_by_pair = {m: float(s) for m, s in zip(pair_meta, scores)}
    return [
        _finalize(per_query[qid], scores_by_pair, store, qid, cfg)
        for qid in store.ids(query_split)
    ]


def rerank(store, output, index, scorer, cfg, qid, query_split="test"):
    """Single-query re-ranking (same semantics as rerank_split)."""
    entries = _candidates(store, index, query_split, qid, output.row(qid), cfg)
    scores_by_pair = {}
    meta, g1, g2 = [], [], []
    for e in entries:
        for nid in e.neighbor_ids:
            meta.append((qid, nid, e.class_id))
            g1.append(store.grid(query_split, qid))
            g2.append(store.grid("train", nid))
    if meta:
        scores = scorer.score(np.stack(g1), np.stack(g2), [(q, n) for q, n, _ in meta])
        scores_by_pair = {m: float(s) for m, s in zip(meta, scores)}
    return _finalize(entries, scores_by_pair, store, qid, cfg)


@dataclass
class RerankReport:
    accuracy_c: float
    accuracy_soft: float  # C x S
    accuracy_hard: float  # C -> S
    mean_comparator_queries: float
    results_soft: list = field(default_factory=list)
    results_hard: list = field(default_factory=list)


def evaluate_rerank(store, output, index, scorer, cfg, query_split="test"):
    """Top-1 accuracy of C alone, C->S (hard), and C x S (soft)."""
    labels = {rid: store.class_of(query_split, rid) for rid in store.ids(query_split)}
    soft_cfg = RerankConfig(cfg.k, cfg.n_neighbors, "soft", cfg.prob_floor)
    hard_cfg = RerankConfig(cfg.k, cfg.n_neighbors, "hard", cfg.prob_floor)
    soft = rerank_split(store, output, index, scorer, soft_cfg, query_split)
    hard = rerank_split(store, output, index, scorer, hard_cfg, query_split)
    n = len(soft)
    acc_c = np.mean(
        [int(np.argmax(output.row(rid)) == labels[rid]) for rid in store.ids(query_split)]
    )
    acc_soft = np.mean([int(r.predicted == labels[r.query_id]) for r in soft])
    acc_hard = np.mean([int(r.predicted == labels[r.query_id]) for r in hard])
    mean_q = float(np.mean([r.comparator_queries for r in soft])) if n else 0.0
    return RerankReport(
        accuracy_c=float(acc_c),
        accuracy_soft=float(acc_soft),
        accuracy_hard=float(acc_hard),
        mean_comparator_queries=mean_q,
        results_soft=soft,
        results_hard=hard,
    )


def save_results(results, path):
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json_obj()) + "\n")


# ------------------------------------------------------------ baselines


def knn_classify(store, index, scorer, qid, k=20, query_split="test"):
    """k-nearest-neighbor vote over global pooled retrieval, rescored."""
    pooled = store.pooled(query_split, qid)
    exclude = {qid} if query_split == "train" else ()
    hits = index.topk_global(pooled, k, exclude=exclude)
    qgrid = store.grid(query_split, qid)
    g1 = np.stack([qgrid] * len(hits))
    g2 = np.stack([store.grid("train", nid) for nid, _, _ in hits])
    scores = scorer.score(g1, g2, [(qid, nid) for nid, _, _ in hits])
    votes, score_sum = {}, {}
    for (nid, _, cid), s in zip(hits, scores):
        votes[cid] = votes.get(cid, 0) + 1
        score_sum[cid] = score_sum.get(cid, 0.0) + float(s)
    # majority; ties -> higher mean score, then lower class id
    return max(
        votes,
        key=lambda c: (votes[c], score_sum[c] / votes[c], -c),
    )


# ---------------------------------------------------------- diagnostics


@dataclass
class SanityReport:
    self_pair_rate: float
    random_grid_rate: float
    shuffled_grid_rate: float


def sanity_suite(model, store, query_split="test", seed=0, batch=64):
    """Fraction of pairs scored > 0.5 for self, random-valued, shuffled pairs."""
    ids = store.ids(query_split)
    grids = store.grids(query_split)
    rng = np.random.default_rng(seed)
    lo, hi = float(grids.min()), float(grids.max())

    def rate(g2):
        scores = np.empty(len(ids))
        for start in range(0, len(ids), 256):
            scores[start : start + 256] = model.score_pairs(
                grids[start : start + 256], g2[start : start + 256]
            )
        return float(np.mean(scores > 0.5))

    self_rate = rate(grids)
    random_grids = rng.uniform(lo, hi, size=grids.shape)
    random_rate = rate(random_grids)
    # emulate a shuffled dataloader: random order, partner = next in batch
    order = rng.permutation(len(ids))
    partner = np.empty(len(ids), dtype=np.int64)
    for start in range(0, len(ids), batch):
        n = min(batch, len(ids) - start)
        block = order[start : start + n]
        partner[block] = block[(np.arange(n) + 1) % n]
    shuffled_rate = rate(grids[partner])
    return SanityReport(self_rate, random_rate, shuffled_rate)


def topq_ceiling(store, output, q_values, query_split="test"):
    """Cumulative top-Q accuracy table: fraction of queries with gt in top-Q."""
    labels = store.labels(query_split)
    order = np.argsort(-output.probs, axis=1, kind="stable")
    rows = {}
    ranks = np.empty(len(labels), dtype=np.int64)
    for i, rid in enumerate(output.ids):
        ranks[i] = int(np.where(order[i] == labels[i])[0][0])
    for q in q_values:
        rows[int(q)] = float(np.mean(ranks < q))
    return rows
