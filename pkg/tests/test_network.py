from dataclasses import replace

import numpy as np
import pytest

from gazeclass import ASD, TD
from gazeclass.errors import CacheConflictError, ConfigError, LabelError, ShapeMismatchError
from gazeclass.network import (
    BackboneConfig,
    CohortFeatures,
    FeatureExtractor,
    SubjectInstance,
    TrainHyper,
    build_asdnet,
    build_backbone,
    compute_cohort_features,
    extract_features,
    fuse_and_classify,
    head_activations,
    load_model,
    mask_feature_rows,
    save_model,
    stack_streams,
    train_asdnet,
    variant_probabilities,
)
from gazeclass.synth import BiasModel, synth_cohort

HYPER = TrainHyper(
    base_lr=0.02, max_iter=200, hidden_dim=16, fc_init="xavier", eval_every=25, log_every=0
)


def separable_instances(n_per_class=6, n_images=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for label in (TD, ASD):
        for s in range(n_per_class):
            image = rng.normal(size=(n_images, dim))
            hfm = rng.normal(0.0, 0.2, (n_images, dim)) + (1.0 if label == ASD else -1.0)
            out.append(SubjectInstance(f"{label}-{s}", 0, image, hfm, label))
    return out


@pytest.fixture(scope="module")
def small_cohort():
    model = BiasModel(fixations_per_image=3, samples_per_fixation=4, object_radius_px=4.0)
    return synth_cohort(2, 2, (24, 20), model, seed=0, sigma_px=2.0)


@pytest.fixture(scope="module")
def backbone():
    return build_backbone(BackboneConfig("tiny", feature_dim=4, input_size=16))


class TestBackbone:
    def test_frozen_and_shaped(self, backbone):
        assert all(backbone.frozen)
        assert backbone.output_shape == (4,)

    def test_vgg_needs_weights(self):
        with pytest.raises(ConfigError):
            build_backbone(BackboneConfig("vgg16_headless", feature_dim=4096))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            BackboneConfig("resnet")

    def test_features_follow_input_order(self, backbone, rng):
        grids = rng.random((5, 3, 16, 16)).astype(np.float32)
        full = extract_features(backbone, grids, batch_size=2).values
        single = extract_features(backbone, grids[3:4]).values
        np.testing.assert_array_equal(full[3], single[0])


class TestFeatureCache:
    def test_hits_after_first_extraction(self, backbone, rng, tmp_path):
        grids = rng.random((2, 3, 16, 16)).astype(np.float32)
        extractor = FeatureExtractor(backbone, tmp_path)
        first = extractor.extract(grids, variant=1).values
        second = extractor.extract(grids, variant=1).values
        assert extractor.stats() == {"hits": 1, "misses": 1}
        np.testing.assert_array_equal(first, second)

        warm = FeatureExtractor(backbone, tmp_path)
        np.testing.assert_array_equal(warm.extract(grids, variant=1).values, first)
        assert warm.hits == 1

    def test_divergent_insert(self, backbone, rng):
        extractor = FeatureExtractor(backbone)
        values = rng.random((2, 4)).astype(np.float32)
        extractor._insert("k", values)
        extractor._insert("k", values.copy())
        with pytest.raises(CacheConflictError):
            extractor._insert("k", values + 1)

    def test_cohort_features_round_trip(self, small_cohort, backbone, tmp_path):
        features = compute_cohort_features(small_cohort, FeatureExtractor(backbone), 20, 16, jobs=2)
        assert len(features.image) == 10
        assert features.shape == (2, 4)
        features.save(tmp_path / "f.gzc")
        back = CohortFeatures.load(tmp_path / "f.gzc", features.labels, features.image_ids)
        for sid in features.subject_ids:
            for v in range(10):
                np.testing.assert_array_equal(back.hfm[sid][v], features.hfm[sid][v])


class TestASDNet:
    def test_probabilities(self, rng):
        net = build_asdnet(3, 4, TrainHyper(hidden_dim=8), seed=0)
        probs = fuse_and_classify(net, rng.random((3, 4)), rng.random((3, 4)))
        assert probs.shape == (2,)
        assert probs.sum() == pytest.approx(1.0, rel=1e-6)

    def test_stream_shapes_must_agree(self):
        with pytest.raises(ShapeMismatchError):
            stack_streams(np.zeros((3, 4)), np.zeros((2, 4)))

    def test_reordering_image_data_with_fc1_columns(self, rng):
        n_images, dim = 5, 4
        net = build_asdnet(n_images, dim, TrainHyper(hidden_dim=8, precision="float64"), seed=2)
        image, hfm = rng.random((n_images, dim)), rng.random((n_images, dim))
        perm = rng.permutation(n_images)
        columns = (perm[:, None] * dim + np.arange(dim)).ravel()
        fc1 = net.params[3]["weight"]
        reordered = net.with_params({(3, "weight"): fc1[:, columns]})
        np.testing.assert_allclose(
            fuse_and_classify(reordered, image[perm], hfm[perm]),
            fuse_and_classify(net, image, hfm),
            rtol=0, atol=1e-12,
        )

    def test_eval_output_is_bit_identical(self, rng):
        stacked = rng.random((4, 2, 3, 4)).astype(np.float32)
        outputs = [
            head_activations(build_asdnet(3, 4, TrainHyper(hidden_dim=8), seed=6), stacked)
            for _ in range(2)
        ]
        for a, b in zip(*outputs):
            np.testing.assert_array_equal(a, b)

    def test_head_activations(self, rng):
        net = build_asdnet(3, 4, TrainHyper(hidden_dim=8), seed=0)
        hidden, logits = head_activations(net, rng.random((5, 2, 3, 4)))
        assert hidden.shape == (5, 8) and logits.shape == (5, 2)
        assert hidden.min() >= 0


class TestTraining:
    def test_single_class_rejected(self):
        instances = [i for i in separable_instances() if i.label == TD]
        with pytest.raises(LabelError):
            train_asdnet(instances, HYPER)

    def test_learns_separable_features(self):
        instances = separable_instances()
        result = train_asdnet(instances, HYPER, seed=1, test_instances=separable_instances(seed=9))
        first = np.mean([p.loss for p in result.curve[:10]])
        last = np.mean([p.loss for p in result.curve[-10:]])
        assert last < first
        assert result.curve[-1].test_acc >= 0.9

    def test_deterministic(self):
        a = train_asdnet(separable_instances(), HYPER, seed=4)
        b = train_asdnet(separable_instances(), HYPER, seed=4)
        assert [p.loss for p in a.curve] == [p.loss for p in b.curve]
        assert a.net.checksum() == b.net.checksum()

    def test_backbone_unchanged_by_extraction_cache_and_training(self, small_cohort, backbone, tmp_path):
        before = backbone.checksum()
        reference = backbone.copy()
        cold = compute_cohort_features(small_cohort, FeatureExtractor(backbone, tmp_path), 20, 16, jobs=2)
        first = train_asdnet(cold.instances(), replace(HYPER, max_iter=20), seed=0)

        warm_extractor = FeatureExtractor(backbone, tmp_path)
        warm = compute_cohort_features(small_cohort, warm_extractor, 20, 16, jobs=2)
        assert warm_extractor.misses == 0 and warm_extractor.hits > 0
        second = train_asdnet(warm.instances(), replace(HYPER, max_iter=20), seed=0)

        assert backbone.checksum() == before
        for (_, _, arr), (_, _, ref) in zip(backbone.named_params(), reference.named_params()):
            np.testing.assert_array_equal(arr, ref)
        assert first.net.checksum() == second.net.checksum()

    def test_zero_learning_rate_keeps_initial_weights(self):
        instances = separable_instances()
        hyper = replace(HYPER, base_lr=0.0, max_iter=15)
        result = train_asdnet(instances, hyper, seed=3)
        n_images, dim = instances[0].image_features.shape
        assert result.net.checksum() == build_asdnet(n_images, dim, hyper, seed=[3, 0]).checksum()

    def test_identical_features_plateau_at_chance(self):
        rng = np.random.default_rng(5)
        image, hfm = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        instances = [SubjectInstance(f"s{k}", 0, image, hfm, k % 2) for k in range(12)]
        hyper = TrainHyper(base_lr=0.02, max_iter=300, hidden_dim=16, batch_size=12, log_every=0)
        result = train_asdnet(instances, hyper, seed=2)
        assert np.mean([p.loss for p in result.curve[-50:]]) == pytest.approx(np.log(2.0), abs=5e-3)

    def test_training_accuracy_on_separable_data(self):
        instances = separable_instances()
        net = train_asdnet(instances, HYPER, seed=1).net
        predicted = [int(np.argmax(fuse_and_classify(net, i.image_features, i.hfm_features))) for i in instances]
        assert predicted == [i.label for i in instances]


class TestPersistence:
    def test_model_round_trip(self, planted_features, planted_head, tmp_path):
        save_model(planted_head, tmp_path / "m.gzc")
        loaded = load_model(tmp_path / "m.gzc")
        assert loaded.checksum() == planted_head.checksum()
        for sid in planted_features.subject_ids:
            np.testing.assert_array_equal(
                variant_probabilities(loaded, planted_features, sid),
                variant_probabilities(planted_head, planted_features, sid),
            )


class TestMasking:
    def test_none_keeps_everything(self, rng):
        values = rng.random((4, 3))
        assert mask_feature_rows(values, None) is values

    def test_zeroes_other_rows(self, rng):
        values = rng.random((4, 3))
        masked = mask_feature_rows(values, {1, 3})
        np.testing.assert_array_equal(masked[[1, 3]], values[[1, 3]])
        assert not masked[[0, 2]].any()

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            mask_feature_rows(rng.random((4, 3)), {4})
