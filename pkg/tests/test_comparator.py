import math

import numpy as np
import pytest

from pcnn import numkernel as nk
from pcnn.classifier import SyntheticClassifier
from pcnn.comparator import (
    ComparatorConfig,
    ComparatorModel,
    TrainConfig,
    TrainingError,
    evaluate_binary,
    expected_param_count,
    load_checkpoint,
    metrics_from_scores,
    one_cycle_lr,
    save_checkpoint,
    train,
)
from pcnn.nnindex import ClassIndex
from pcnn.pairsampler import SamplerConfig, sample_eval, sample_train

from conftest import toy_store


def small_cfg(**kw):
    base = dict(depth=8, tokens=3, blocks=1, cross_layers=1, self_layers=1, heads=2)
    base.update(kw)
    return ComparatorConfig(**base)


class TestArchitecture:
    @pytest.mark.parametrize("lmn", [(1, 1, 1), (2, 4, 4), (3, 3, 3), (0, 0, 0)])
    def test_param_count_matches_formula(self, lmn):
        l, m, n = lmn
        cfg = small_cfg(blocks=l, cross_layers=m, self_layers=n)
        model = ComparatorModel(cfg, seed=0)
        assert model.param_count() == expected_param_count(cfg)

    def test_untrained_score_is_half(self):
        # zero-init final MLP layer forces logit 0 before any training
        model = ComparatorModel(small_cfg(), seed=1)
        rng = np.random.default_rng(0)
        g1 = rng.normal(size=(5, 3, 8))
        g2 = rng.normal(size=(5, 3, 8))
        np.testing.assert_array_equal(model.score_pairs(g1, g2), 0.5)

    def test_swap_symmetry(self):
        model = ComparatorModel(small_cfg(blocks=2, self_layers=2), seed=2)
        # give the head nonzero weights so symmetry is tested on real scores
        rng = np.random.default_rng(3)
        model.mlp_w[3].data = rng.normal(size=model.mlp_w[3].data.shape)
        g1 = rng.normal(size=(4, 3, 8))
        g2 = rng.normal(size=(4, 3, 8))
        # symmetrize the first MLP layer so concat order cannot matter
        d = model.cfg.depth
        model.mlp_w[0].data[d:] = model.mlp_w[0].data[:d]
        a = model.score_pairs(g1, g2)
        b = model.score_pairs(g2, g1)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_blocks_is_mlp_only(self):
        model = ComparatorModel(small_cfg(blocks=0, cross_layers=0, self_layers=0), seed=4)
        rng = np.random.default_rng(5)
        model.mlp_w[3].data = rng.normal(size=model.mlp_w[3].data.shape)
        g1 = rng.normal(size=(2, 3, 8))
        g2 = rng.normal(size=(2, 3, 8))
        # token order must not matter: the L=0 branch only sees pooled tokens
        perm = rng.permutation(3)
        a = model.score_pairs(g1, g2)
        b = model.score_pairs(g1[:, perm], g2)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_shape_mismatch_raises(self):
        model = ComparatorModel(small_cfg(), seed=0)
        with pytest.raises(nk.ShapeError):
            model.score_pairs(np.zeros((1, 2, 8)), np.zeros((1, 3, 8)))

    def test_heads_must_divide_depth(self):
        with pytest.raises(nk.ConfigError):
            ComparatorConfig(depth=10, tokens=2, heads=4)

    def test_forward_pair_matches_batch(self):
        model = ComparatorModel(small_cfg(), seed=6)
        rng = np.random.default_rng(7)
        model.mlp_w[3].data = rng.normal(size=model.mlp_w[3].data.shape)
        g1 = rng.normal(size=(3, 3, 8))
        g2 = rng.normal(size=(3, 3, 8))
        batch = model.score_pairs(g1, g2)
        singles = [model.forward_pair(g1[i], g2[i]) for i in range(3)]
        np.testing.assert_allclose(batch, singles, atol=1e-12)


class TestMetrics:
    def test_perfect_separation(self):
        m = metrics_from_scores([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
        assert m.accuracy == m.precision == m.recall == m.f1 == 1.0
        assert m.confusion == {"tp": 2, "fp": 0, "tn": 2, "fn": 0}

    def test_threshold_is_strict(self):
        # a score of exactly 0.5 counts as a reject
        m = metrics_from_scores([0.5, 0.5], [1, 0])
        assert m.confusion == {"tp": 0, "fp": 0, "tn": 1, "fn": 1}
        assert m.accuracy == 0.5

    def test_known_confusion(self):
        m = metrics_from_scores([0.9, 0.4, 0.7, 0.2], [1, 1, 0, 0])
        assert m.confusion == {"tp": 1, "fp": 1, "tn": 1, "fn": 1}
        assert m.precision == 0.5
        assert m.recall == 0.5
        assert m.f1 == 0.5

    def test_mean_confidence(self):
        m = metrics_from_scores([0.9, 0.7, 0.1], [1, 1, 0])
        assert m.mean_confidence["correctly_accept"] == pytest.approx(0.8)
        assert m.mean_confidence["correctly_reject"] == pytest.approx(0.9)
        assert math.isnan(m.mean_confidence["incorrectly_accept"])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics_from_scores([], [])

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            metrics_from_scores([0.5], [1], threshold=1.0)


class TestSchedule:
    def test_endpoints_and_peak(self):
        cfg = TrainConfig(max_lr=0.1)
        total = 1001
        lrs = [one_cycle_lr(s, total, cfg) for s in range(total)]
        assert lrs[0] == pytest.approx(cfg.max_lr / cfg.div_factor)
        assert max(lrs) == pytest.approx(cfg.max_lr, rel=1e-4)
        assert lrs[-1] == pytest.approx(cfg.max_lr / cfg.final_div_factor, rel=1e-2)
        peak = int(np.argmax(lrs))
        assert abs(peak / (total - 1) - cfg.warmup_fraction) < 0.01

    def test_monotone_up_then_down(self):
        cfg = TrainConfig(max_lr=0.05)
        lrs = [one_cycle_lr(s, 200, cfg) for s in range(200)]
        peak = int(np.argmax(lrs))
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:], lrs[peak + 1 :]))


@pytest.fixture(scope="module")
def tiny_task():
    store, centroids = toy_store(classes=4, per_class=8, tokens=3, depth=8, seed=10)
    index = ClassIndex.build(store)
    clf = SyntheticClassifier(centroids, tau=1.0, seed=0)
    out_train = clf.predict_split(store, "train")
    out_test = clf.predict_split(store, "test")
    scfg = SamplerConfig(q=3, seed=0)
    train_pairs = sample_train(store, out_train, index, scfg)
    eval_pairs = sample_eval(store, out_test, index, scfg)
    return store, train_pairs, eval_pairs


class TestTraining:
    def test_learns_separable_task(self, tiny_task):
        store, train_pairs, eval_pairs = tiny_task
        model = ComparatorModel(small_cfg(), seed=42)
        cfg = TrainConfig(epochs=8, batch_size=64, max_lr=0.05, seed=42)
        model, report = train(model, store, train_pairs, eval_pairs, cfg)
        assert len(report.epochs) == 8
        best = report.epochs[report.selected_epoch]
        assert best["eval_accuracy"] > 0.9
        # restored weights must reproduce the selected epoch's metrics
        m = evaluate_binary(model, store, eval_pairs)
        assert m.f1 == pytest.approx(best["f1"], abs=1e-12)

    def test_deterministic(self, tiny_task):
        store, train_pairs, eval_pairs = tiny_task
        cfg = TrainConfig(epochs=2, batch_size=64, max_lr=0.02, seed=7)
        runs = []
        for _ in range(2):
            model = ComparatorModel(small_cfg(), seed=7)
            model, report = train(model, store, train_pairs, eval_pairs, cfg)
            runs.append((model.snapshot(), report.epochs))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])

    def test_selected_epoch_has_max_f1(self, tiny_task):
        store, train_pairs, eval_pairs = tiny_task
        model = ComparatorModel(small_cfg(), seed=1)
        cfg = TrainConfig(epochs=5, batch_size=64, max_lr=0.05, seed=1)
        _, report = train(model, store, train_pairs, eval_pairs, cfg)
        f1s = [row["f1"] for row in report.epochs]
        best = max(f1s)
        assert f1s[report.selected_epoch] == best
        assert report.selected_epoch == f1s.index(best)  # ties keep earliest

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverging_lr_raises(self, tiny_task):
        store, train_pairs, eval_pairs = tiny_task
        model = ComparatorModel(small_cfg(), seed=0)
        cfg = TrainConfig(epochs=20, batch_size=64, max_lr=1e6, seed=0)
        with pytest.raises(TrainingError, match="epoch"):
            train(model, store, train_pairs, eval_pairs, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestCheckpoints:
    def test_roundtrip_bitwise(self, tiny_task, tmp_path):
        store, train_pairs, eval_pairs = tiny_task
        model = ComparatorModel(small_cfg(), seed=3)
        cfg = TrainConfig(epochs=1, batch_size=64, max_lr=0.02, seed=3)
        model, _ = train(model, store, train_pairs, eval_pairs, cfg)
        save_checkpoint(model, tmp_path / "m.bin", tmp_path / "m.json",
                        extra={"note": "x"})
        loaded, header = load_checkpoint(tmp_path / "m.bin", tmp_path / "m.json")
        assert header["extra"] == {"note": "x"}
        for k, v in model.state_arrays().items():
            np.testing.assert_array_equal(loaded.state_arrays()[k], v)
        rng = np.random.default_rng(0)
        g1 = rng.normal(size=(4, 3, 8))
        g2 = rng.normal(size=(4, 3, 8))
        np.testing.assert_array_equal(
            model.score_pairs(g1, g2), loaded.score_pairs(g1, g2)
        )
