import json

import numpy as np
import pytest

from pcnn.experiment import (
    ExperimentConfig,
    StageError,
    prepare,
    run,
    run_seed,
    train_comparator,
)
from pcnn.synthgen import SyntheticSpec, make_centroids, synth_gen

TINY = {
    "classes": 4,
    "train_per_class": 6,
    "test_per_class": 4,
    "depth": 8,
    "tokens": 2,
    "groups": 2,
    "token_noise": 0.3,
    "tau": 1.0,
    "corruption_rate": 0.3,
    "corruption_q": 2,
}


def tiny_cfg(tmp_path, **kw):
    base = dict(
        seeds=[1],
        output_dir=str(tmp_path / "out"),
        synthetic=dict(TINY),
        sampler={"q": 3},
        comparator={"heads": 2},
        train={"epochs": 2, "batch_size": 64, "max_lr": 0.02},
        rerank={"k": 3},
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestSynthGen:
    def test_deterministic(self):
        spec = SyntheticSpec(**TINY)
        a, ca = synth_gen(spec, 5)
        b, cb = synth_gen(spec, 5)
        np.testing.assert_array_equal(ca, cb)
        assert a.manifest.checksum == b.manifest.checksum

    def test_seed_changes_data(self):
        spec = SyntheticSpec(**TINY)
        a, _ = synth_gen(spec, 5)
        b, _ = synth_gen(spec, 6)
        assert a.manifest.checksum != b.manifest.checksum

    def test_sizes_and_labels(self):
        spec = SyntheticSpec(**TINY)
        store, centroids = synth_gen(spec, 0)
        assert store.size("train") == 24
        assert store.size("test") == 16
        assert centroids.shape == (4, 8)
        counts = np.bincount(store.labels("train"), minlength=4)
        assert list(counts) == [6, 6, 6, 6]

    def test_min_centroid_separation(self):
        spec = SyntheticSpec(**{**TINY, "separation": 2.0})
        c = make_centroids(spec, 3)
        dmin = min(
            float(np.linalg.norm(c[i] - c[j]))
            for i in range(len(c))
            for j in range(i + 1, len(c))
        )
        assert dmin >= 2.0 - 1e-9

    def test_within_group_closer_than_across(self):
        spec = SyntheticSpec(classes=20, groups=5, depth=16)
        c = make_centroids(spec, 0)
        sizes = [len(a) for a in np.array_split(np.arange(20), 5)]
        bounds = np.cumsum([0] + sizes)
        group_of = np.empty(20, dtype=int)
        for g in range(5):
            group_of[bounds[g] : bounds[g + 1]] = g
        within, across = [], []
        for i in range(20):
            for j in range(i + 1, 20):
                d = float(np.linalg.norm(c[i] - c[j]))
                (within if group_of[i] == group_of[j] else across).append(d)
        assert np.mean(within) < np.mean(across)

    def test_records_near_centroid(self):
        spec = SyntheticSpec(**{**TINY, "token_noise": 0.01})
        store, centroids = synth_gen(spec, 1)
        for rid in store.ids("train")[:5]:
            cid = store.class_of("train", rid)
            d = np.linalg.norm(store.pooled("train", rid) - centroids[cid])
            assert d < 0.1

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(classes=1)
        with pytest.raises(ValueError):
            SyntheticSpec(groups=0)
        with pytest.raises(ValueError):
            SyntheticSpec(separation=0.0)


class TestPipeline:
    def test_prepare_deterministic(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        a = prepare(cfg, 1)
        b = prepare(cfg, 1)
        assert a.store.manifest.checksum == b.store.manifest.checksum
        np.testing.assert_array_equal(a.out_test.probs, b.out_test.probs)
        assert [(p.query_id, p.neighbor_id) for p in a.train_pairs.pairs] == [
            (p.query_id, p.neighbor_id) for p in b.train_pairs.pairs
        ]

    def test_eval_pairs_balanced(self, tmp_path):
        pipe = prepare(tiny_cfg(tmp_path), 1)
        assert len(pipe.eval_pairs.positives()) == len(pipe.eval_pairs.negatives())

    def test_stage_error_names_stage(self, tmp_path):
        cfg = tiny_cfg(tmp_path, sampler={"q": 50})  # classes too small for 50 positives
        with pytest.raises(StageError, match="sampling"):
            prepare(cfg, 1)

    def test_bad_data_stage(self, tmp_path):
        cfg = tiny_cfg(tmp_path, manifest_path=str(tmp_path / "missing.json"),
                       payload_path=str(tmp_path / "missing.bin"))
        with pytest.raises(StageError, match="data"):
            prepare(cfg, 1)

    def test_subsample_shrinks_index(self, tmp_path):
        cfg = tiny_cfg(tmp_path, subsample_fraction=0.5, sampler={"q": 2})
        pipe = prepare(cfg, 1)
        for c in pipe.index.classes:
            assert pipe.index.class_size(c) == 3  # ceil(0.5 * 6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=[])

    def test_from_json(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        text = json.dumps(
            {"seeds": [3], "output_dir": "x", "synthetic": dict(TINY)}
        )
        loaded = ExperimentConfig.from_json(text)
        assert loaded.seeds == [3]


class TestRun:
    def test_run_seed_artifacts(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        out_dir = tmp_path / "out" / "seed_1"
        results = run_seed(cfg, 1, str(out_dir))
        for name in (
            "checkpoint.bin", "checkpoint.json", "train_report.json",
            "rerank_soft.jsonl", "rerank_hard.jsonl", "pairs_train.jsonl",
            "pairs_eval.jsonl", "results.json",
        ):
            assert (out_dir / name).exists(), name
        on_disk = json.loads((out_dir / "results.json").read_text())
        # json stringifies the integer Q keys of the ceiling table
        on_disk["topq_ceiling"] = {int(k): v for k, v in on_disk["topq_ceiling"].items()}
        assert on_disk == results
        assert 0 <= results["binary"]["accuracy"] <= 1
        assert set(results["rerank"]) == {
            "accuracy_c", "accuracy_soft", "accuracy_hard", "mean_comparator_queries",
        }

    def test_run_summary(self, tmp_path):
        cfg = tiny_cfg(tmp_path, seeds=[1, 2])
        summary = run(cfg)
        assert summary["seeds"] == [1, 2]
        assert len(summary["per_seed"]) == 2
        accs = [r["binary"]["accuracy"] for r in summary["per_seed"]]
        assert summary["binary_accuracy"]["mean"] == pytest.approx(np.mean(accs))
        assert summary["binary_accuracy"]["std"] == pytest.approx(np.std(accs))
        on_disk = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert on_disk["seeds"] == [1, 2]

    def test_reload_checkpoint_reproduces_scores(self, tmp_path):
        from pcnn.comparator import load_checkpoint

        cfg = tiny_cfg(tmp_path)
        out_dir = tmp_path / "out" / "seed_1"
        run_seed(cfg, 1, str(out_dir))
        model, header = load_checkpoint(out_dir / "checkpoint.bin", out_dir / "checkpoint.json")
        pipe = prepare(cfg, 1)
        fresh, _ = train_comparator(cfg, 1, pipe)
        g1 = pipe.store.grids("test")[:8]
        g2 = pipe.store.grids("train")[:8]
        np.testing.assert_array_equal(
            model.score_pairs(g1, g2), fresh.score_pairs(g1, g2)
        )
