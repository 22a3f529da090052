"""Probe machinery: attentive probe, k-NN, logreg, standardization, PCA."""

import numpy as np
import pytest

from maskclust import network, nn, probes
from maskclust.probes import SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL


def blob_bank(seed=0, n_per=60, d=2, gap=6.0, with_test=True):
    rng = np.random.default_rng(seed)
    feats, labels, split = [], [], []
    for part, code in ((1.0, SPLIT_TRAIN), (0.25, SPLIT_VAL), (0.25, SPLIT_TEST)):
        if code == SPLIT_TEST and not with_test:
            continue
        m = int(n_per * part)
        for cls in (0, 1):
            center = np.zeros(d)
            center[0] = gap * (1 if cls else -1) / 2
            feats.append(center + rng.standard_normal((m, d)))
            labels.append(np.full(m, cls))
            split.append(np.full(m, code))
    return probes.FeatureBank(
        np.concatenate(feats), np.concatenate(labels), np.concatenate(split)
    )


class TestFeatureBank:
    def test_nan_rejected(self):
        f = np.zeros((3, 2))
        f[1, 1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            probes.FeatureBank(f, np.zeros(3), np.zeros(3))

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            probes.FeatureBank(np.zeros((3, 2)), np.zeros(2), np.zeros(3))

    def test_archive_roundtrip(self, tmp_path):
        bank = blob_bank()
        path = tmp_path / "bank.npz"
        probes.save_bank(path, bank)
        loaded = probes.load_bank(path)
        np.testing.assert_array_equal(loaded.features, bank.features)
        np.testing.assert_array_equal(loaded.labels, bank.labels)
        np.testing.assert_array_equal(loaded.split, bank.split)
        np.testing.assert_array_equal(loaded.provenance, bank.provenance)


class TestAttentiveProbeShape:
    @pytest.mark.parametrize(
        "d,c,expect",
        [(64, 4, 8640), (256, 10, 134_400), (1024, 1000, 3_124_224)],
    )
    def test_param_count_formula(self, d, c, expect):
        assert probes.attentive_probe_param_count(d, c) == expect
        probe = probes.AttentiveProbe(d, c, np.random.default_rng(0))
        assert probe.param_count() == expect

    def test_indivisible_dim_needs_explicit_width(self):
        with pytest.raises(ValueError, match="head width"):
            probes.AttentiveProbe(48, 4, np.random.default_rng(0))
        probe = probes.AttentiveProbe(48, 4, np.random.default_rng(0), head_width=16)
        assert probe.param_count() == probes.attentive_probe_param_count(48, 4)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        probe = probes.AttentiveProbe(8, 3, rng, head_width=4)
        x = rng.standard_normal((2, 5, 8))
        w = rng.standard_normal((2, 3))

        def fwd_bwd():
            y = probe.forward(x)
            probe.backward(w)
            return float(np.sum(y * w))

        x0 = nn.gather_params(probe)
        probe.zero_grad()
        fwd_bwd()
        analytic = nn.gather_grads(probe)

        def f(vec):
            nn.scatter_params(probe, vec)
            return fwd_bwd()

        numeric = nn.numeric_grad(f, x0)
        nn.scatter_params(probe, x0)
        # the key bias gradient is exactly zero (softmax shift invariance),
        # so lift the relative-error floor above the finite-difference noise
        assert nn.max_rel_error(analytic, numeric, floor=1e-5) < 1e-6


class TestAttentiveProbeTraining:
    def test_separable_fixture_high_accuracy(self):
        rng = np.random.default_rng(2)
        n_img, n_tok, d = 80, 4, 64
        labels = np.tile([0, 1], n_img // 2)
        feats = 0.3 * rng.standard_normal((n_img, n_tok, d))
        feats[:, :, 0] += np.where(labels == 0, 4.0, -4.0)[:, None]
        probe, report = probes.attentive_probe_train(
            feats, labels, seed=0, epochs=4, batch_size=32,
            lr_grid=(1e-3, 5e-3), wd_grid=(5e-4,),
        )
        assert report.val_metric >= 0.99
        assert report.selected in [e["params"] for e in report.grid]

    def test_selection_reproducible(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((40, 4, 64))
        labels = np.tile([0, 1], 20)
        kw = dict(seed=9, epochs=2, batch_size=16, lr_grid=(1e-3, 2e-3), wd_grid=(1e-3,))
        _, r1 = probes.attentive_probe_train(feats, labels, **kw)
        _, r2 = probes.attentive_probe_train(feats, labels, **kw)
        assert r1.selected == r2.selected
        assert [e["val_metric"] for e in r1.grid] == [e["val_metric"] for e in r2.grid]

    def test_missing_class_rejected(self):
        feats = np.zeros((10, 2, 64))
        labels = np.array([0, 2] * 5)  # class 1 absent
        with pytest.raises(ValueError, match="class"):
            probes.attentive_probe_train(feats, labels)


class TestSelectBest:
    def test_first_on_ties(self):
        entries = [
            {"params": {"a": 1}, "val_metric": 0.5},
            {"params": {"a": 2}, "val_metric": 0.7},
            {"params": {"a": 3}, "val_metric": 0.7},
        ]
        assert probes.select_best(entries) == 1


def brute_force_knn(bank_f, bank_l, queries, k, metric):
    out = []
    n_labels = int(bank_l.max()) + 1
    for q in queries:
        if metric == "l2":
            d = np.array([float(np.sum((q - x) ** 2)) for x in bank_f])
        else:
            d = np.array(
                [
                    1.0 - float(np.dot(q, x) / (np.linalg.norm(q) * np.linalg.norm(x)))
                    for x in bank_f
                ]
            )
        order = sorted(range(len(bank_f)), key=lambda i: (d[i], i))[:k]
        lab = [int(bank_l[i]) for i in order]
        dd = [d[i] for i in order]
        counts = np.bincount(lab, minlength=n_labels)
        winners = np.flatnonzero(counts == counts.max())
        best = min((min(dd[j] for j in range(k) if lab[j] == wl), wl) for wl in winners)
        out.append(best[1])
    return np.array(out)


class TestKnn:
    def test_exact_bank_point(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((20, 5))
        l = rng.integers(0, 3, 20)
        pred = probes.knn_predict(f, l, f[7], 1, "l2")
        assert pred[0] == l[7]

    @pytest.mark.parametrize("metric", ["l2", "cosine"])
    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_matches_brute_force(self, metric, k):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((100, 6))
        l = rng.integers(0, 4, 100)
        q = rng.standard_normal((25, 6))
        got = probes.knn_predict(f, l, q, k, metric)
        np.testing.assert_array_equal(got, brute_force_knn(f, l, q, k, metric))

    def test_duplicate_distance_tie_break(self):
        # two bank points at identical distance with different labels:
        # k=2 vote ties, equidistant too, so the lower label index wins
        f = np.array([[1.0, 0.0], [-1.0, 0.0]])
        l = np.array([1, 0])
        pred = probes.knn_predict(f, l, np.array([[0.0, 0.0]]), 2, "l2")
        assert pred[0] == 0

    def test_vote_tie_nearer_neighbor_wins(self):
        f = np.array([[1.0, 0.0], [2.0, 0.0], [-1.5, 0.0], [-1.6, 0.0]])
        l = np.array([7, 7, 2, 2])
        pred = probes.knn_predict(f, l, np.array([[0.0, 0.0]]), 4, "l2")
        assert pred[0] == 7  # nearest neighbor at distance 1 carries label 7

    def test_k_bounds_and_empty(self):
        f = np.ones((3, 2))
        l = np.zeros(3, dtype=int)
        with pytest.raises(ValueError):
            probes.knn_predict(f, l, f, 4, "l2")
        with pytest.raises(ValueError, match="empty"):
            probes.knn_predict(np.zeros((0, 2)), np.zeros(0, int), f, 1, "l2")

    def test_knn_probe_report(self):
        bank = blob_bank(seed=6)
        report = probes.knn_probe(bank, k_grid=(1, 3), metrics=("l2", "cosine"))
        assert report.test_metric is not None and report.test_metric > 0.9
        assert len(report.grid) == 4


class TestLogreg:
    def test_separable_blobs(self):
        bank = blob_bank(seed=7)
        model = probes.fit_logreg(*bank.subset(SPLIT_TRAIN), c_reg=1e3)
        val_f, val_l = bank.subset(SPLIT_VAL)
        assert probes.accuracy(model.predict(val_f), val_l) >= 0.99

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="class"):
            probes.fit_logreg(np.random.randn(10, 2), np.zeros(10, int), 1.0)

    def test_strong_regularization_limit(self):
        # labels independent of features: once regularization crushes the
        # weights, nothing predicts better than the balanced class prior
        rng = np.random.default_rng(8)
        train_f = rng.standard_normal((400, 2))
        train_l = np.tile([0, 1], 200)
        model = probes.fit_logreg(train_f, train_l, c_reg=1e-6)
        proba = model.predict_proba(train_f)
        assert np.max(np.abs(proba - 0.5)) < 0.02
        acc = probes.accuracy(model.predict(train_f), train_l)
        assert abs(acc - 0.5) <= 0.05

    def test_probe_grid_and_refit(self):
        bank = blob_bank(seed=9)
        model, report = probes.logreg_probe(bank, c_grid=(1e-6, 1.0, 1e3))
        assert len(report.grid) == 3
        assert report.test_metric > 0.9
        assert "grid_converged" in report.extras
        assert isinstance(model.converged, bool)


class TestStandardize:
    def test_train_split_post_conditions(self):
        bank = blob_bank(seed=10)
        out, stats = probes.standardize(bank)
        train = out.features[out.split == SPLIT_TRAIN]
        assert np.max(np.abs(train.mean(axis=0))) <= 1e-6
        assert np.max(np.abs(train.std(axis=0) - 1.0)) <= 1e-6

    def test_constant_column_zeroed(self):
        f = np.random.default_rng(11).standard_normal((20, 3))
        f[:, 1] = 4.2
        bank = probes.FeatureBank(f, np.zeros(20), np.zeros(20))
        out, _ = probes.standardize(bank)
        np.testing.assert_array_equal(out.features[:, 1], 0.0)

    def test_idempotent_on_standardized(self):
        bank = blob_bank(seed=12)
        once, _ = probes.standardize(bank)
        twice, _ = probes.standardize(once)
        np.testing.assert_allclose(twice.features, once.features, atol=1e-6)

    def test_val_test_use_train_stats(self):
        bank = blob_bank(seed=13)
        out, stats = probes.standardize(bank)
        sel = bank.split == SPLIT_TEST
        oracle = (bank.features[sel] - stats["mean"]) / stats["std"]
        np.testing.assert_allclose(out.features[sel], oracle, atol=1e-12)


class TestPredictorPooling:
    def setup_method(self):
        cfg = network.NetworkConfig(
            patch_size=8, enc_depth=2, enc_dim=16, enc_heads=2, pred_depth=2,
            n_reg=2, stochastic_depth=0.0,
        )
        self.enc, self.pred = network.build_student(cfg, np.random.default_rng(14))
        self.images = np.random.default_rng(15).standard_normal((2, 16, 16, 3))

    def test_shape_and_determinism(self):
        a = probes.predictor_pooling(self.images, self.enc, self.pred)
        b = probes.predictor_pooling(self.images, self.enc, self.pred)
        assert a.shape == (2, 16)
        np.testing.assert_array_equal(a, b)

    def test_uses_exactly_one_attention_layer(self):
        before = [blk.attn.n_calls for blk in self.pred.blocks]
        probes.predictor_pooling(self.images, self.enc, self.pred)
        after = [blk.attn.n_calls for blk in self.pred.blocks]
        assert after[0] == before[0] + 1
        assert after[1:] == before[1:]


class TestPcaMaps:
    def test_rank_one_padding(self):
        rng = np.random.default_rng(16)
        direction = rng.standard_normal(8)
        coef = rng.standard_normal((1, 12, 1))
        feats = coef * direction
        maps = probes.pca_feature_map(feats, (3, 4))
        assert maps.shape == (1, 3, 4, 3)
        assert maps[..., 0].std() > 0
        np.testing.assert_array_equal(maps[..., 1], 0.5)
        np.testing.assert_array_equal(maps[..., 2], 0.5)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(17)
        feats = rng.standard_normal((3, 16, 10))
        for per_image in (True, False):
            maps = probes.pca_feature_map(feats, (4, 4), per_image=per_image)
            assert maps.min() >= 0.0 and maps.max() <= 1.0

    def test_components_orthogonal_and_match_eigh(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((200, 7)) @ rng.standard_normal((7, 7))
        scores, dirs, rank = probes.pca_components(x, 3)
        gram = dirs @ dirs.T
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-6)
        centered = x - x.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered)
        top = evecs[:, ::-1][:, :3]
        for i in range(3):
            assert abs(float(dirs[i] @ top[:, i])) > 1.0 - 1e-8

    def test_lattice_mismatch(self):
        with pytest.raises(ValueError):
            probes.pca_feature_map(np.zeros((1, 12, 4)), (3, 3))


class TestMeanIou:
    def test_perfect_and_disjoint(self):
        a = np.array([0, 0, 1, 1])
        assert probes.mean_iou(a, a, 2) == 1.0
        assert probes.mean_iou(a, 1 - a, 2) == 0.0

    def test_known_value(self):
        pred = np.array([0, 0, 1, 1])
        gt = np.array([0, 1, 1, 1])
        # class 0: inter 1, union 2; class 1: inter 2, union 3
        np.testing.assert_allclose(probes.mean_iou(pred, gt, 2), (0.5 + 2 / 3) / 2)


class TestBankBuilding:
    def test_build_patch_bank_provenance(self):
        rng = np.random.default_rng(19)
        feats = rng.standard_normal((2, 3, 4))
        labels = np.array([[0, 1, 2], [2, 1, 0]])
        bank = probes.build_patch_bank(feats, labels, np.array([SPLIT_TRAIN, SPLIT_TEST]))
        assert len(bank) == 6
        np.testing.assert_array_equal(bank.provenance[:, 0], [0, 0, 0, 1, 1, 1])
        np.testing.assert_array_equal(bank.provenance[:, 1], [0, 1, 2, 0, 1, 2])
        np.testing.assert_array_equal(bank.split, [0, 0, 0, 2, 2, 2])
        np.testing.assert_array_equal(bank.labels, [0, 1, 2, 2, 1, 0])

    def test_extract_patch_features_drops_registers(self):
        cfg = network.NetworkConfig(
            patch_size=8, enc_depth=1, enc_dim=16, enc_heads=2, n_reg=3,
            stochastic_depth=0.0,
        )
        enc, _ = network.build_student(cfg, np.random.default_rng(20))
        images = np.random.default_rng(21).standard_normal((2, 16, 16, 3))
        feats = probes.extract_patch_features(images, enc)
        assert feats.shape == (2, 4, 16)
