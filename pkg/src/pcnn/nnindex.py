"""Exact squared-L2 nearest-neighbor index over pooled train vectors.

Distances are exact squared L2 (monotone with L2); ties break by ascending
record id. The index is immutable after build; `subsample` returns a new
masked view.
"""

import numpy as np

from . import kernels


class InsufficientCandidatesError(ValueError):
    pass


class ClassIndex:
    def __init__(self, class_vectors, class_ids):
        """class_vectors: cid -> (N, D); class_ids: cid -> sorted id array."""
        self._vecs = class_vectors
        self._ids = class_ids

    @staticmethod
    def build(store, split="train"):
        vecs, ids = {}, {}
        pooled = store.pooled_all(split)
        labels = store.labels(split)
        all_ids = np.array(store.ids(split), dtype=np.int64)
        for cid in range(store.manifest.num_classes):
            mask = labels == cid
            cid_ids = all_ids[mask]
            order = np.argsort(cid_ids)
            ids[cid] = cid_ids[order]
            vecs[cid] = np.ascontiguousarray(pooled[mask][order])
        return ClassIndex(vecs, ids)

    @property
    def classes(self):
        return sorted(self._ids)

    def class_size(self, class_id):
        return len(self._ids.get(class_id, ()))

    def subsample(self, fraction, seed):
        """Keep ceil(fraction * size) records per class, seeded uniform."""
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        vecs, ids = {}, {}
        for cid in self._ids:
            n = len(self._ids[cid])
            keep = int(np.ceil(fraction * n))
            rng = np.random.default_rng(np.random.SeedSequence([seed, cid]))
            chosen = np.sort(rng.choice(n, size=keep, replace=False))
            ids[cid] = self._ids[cid][chosen]
            vecs[cid] = np.ascontiguousarray(self._vecs[cid][chosen])
        return ClassIndex(vecs, ids)

    def _ranked(self, query, class_id, exclude, limit=None):
        if class_id not in self._ids:
            raise KeyError(f"unknown class id {class_id}")
        ids = self._ids[class_id]
        vecs = self._vecs[class_id]
        if exclude:
            mask = ~np.isin(ids, list(exclude))
            ids, vecs = ids[mask], vecs[mask]
        if len(ids) == 0:
            return ids, np.empty(0)
        dists = kernels.sqdist_one(np.ascontiguousarray(query, dtype=np.float64), vecs)
        if limit is not None and limit < len(ids):
            # tie-safe partial selection: keep every record at or below the
            # limit-th distance, then order only the survivors
            part = np.argpartition(dists, limit - 1)
            thresh = dists[part[limit - 1]]
            keep = np.flatnonzero(dists <= thresh)
            ids, dists = ids[keep], dists[keep]
        order = np.lexsort((ids, dists))
        return ids[order], dists[order]

    def nearest_in_class(self, query, class_id, rank=1, exclude=()):
        """n-th nearest (1-based) non-excluded record of a class."""
        if rank < 1:
            raise ValueError("rank must be >= 1")
        ids, dists = self._ranked(query, class_id, exclude, limit=rank)
        if len(ids) < rank:
            raise InsufficientCandidatesError(
                f"class {class_id}: need rank {rank}, only {len(ids)} candidates"
            )
        return int(ids[rank - 1]), float(dists[rank - 1])

    def nearest_k_in_class(self, query, class_id, k, exclude=()):
        ids, dists = self._ranked(query, class_id, exclude, limit=k)
        if len(ids) < k:
            raise InsufficientCandidatesError(
                f"class {class_id}: need {k} candidates, have {len(ids)}"
            )
        return [(int(i), float(d)) for i, d in zip(ids[:k], dists[:k])]

    def topk_global(self, query, k, exclude=()):
        """Exact global top-k (ascending distance, id tie-break)."""
        all_ids = np.concatenate([self._ids[c] for c in sorted(self._ids)])
        all_vecs = np.concatenate([self._vecs[c] for c in sorted(self._ids)])
        all_cls = np.concatenate(
            [np.full(len(self._ids[c]), c, dtype=np.int64) for c in sorted(self._ids)]
        )
        if exclude:
            mask = ~np.isin(all_ids, list(exclude))
            all_ids, all_vecs, all_cls = all_ids[mask], all_vecs[mask], all_cls[mask]
        if len(all_ids) < k:
            raise InsufficientCandidatesError(f"need {k} candidates, have {len(all_ids)}")
        dists = kernels.sqdist_one(
            np.ascontiguousarray(query, dtype=np.float64), np.ascontiguousarray(all_vecs)
        )
        order = np.lexsort((all_ids, dists))[:k]
        return [
            (int(all_ids[i]), float(dists[i]), int(all_cls[i])) for i in order
        ]
