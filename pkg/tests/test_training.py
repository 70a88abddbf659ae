import copy
import math

import numpy as np
import pytest
import torch

from conceptproto.backbone import BackboneSpec, build_backbone
from conceptproto.data.manifest import Preprocessing, load_dataset, synthetic_manifest
from conceptproto.distribution import CCDParams, ConceptDistribution, ccd_loss, classify, js_divergence
from conceptproto.errors import StaleStateError, TrainingDivergedError
from conceptproto.kernel_alignment import cka_loss_layer
from conceptproto.pipeline import batch_responses, normalize_responses
from conceptproto.segmentation import SegmentationConfig, flatten_for_cka, split_segments
from conceptproto.training import (
    TrainConfig,
    TrainState,
    compute_bank,
    compute_centroids,
    fit,
    gradient_check,
    make_optimizer,
    refresh_globals,
    total_loss,
    train_epoch,
)


def tiny_dataset(per_class=4, seed=5, image_size=16, classes=None):
    m = synthetic_manifest("toy", per_class=per_class, seed=seed, image_size=image_size, classes=classes)
    return load_dataset(m, Preprocessing(image_size=image_size))


def tiny_config(**kwargs):
    defaults = dict(epochs=1, batch_size=8, learning_rate=1e-3, segment_channels=4, seed=3)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def tiny_backbone(seed=3, channels=(8, 8)):
    return build_backbone(BackboneSpec(channels=channels, strides=(2,) * len(channels), seed=seed))


@pytest.fixture(scope="module")
def prepared():
    """Backbone + dataset + refreshed globals shared by read-only tests."""
    torch.manual_seed(0)
    dataset = tiny_dataset()
    backbone = tiny_backbone()
    seg = SegmentationConfig.uniform((8, 8), 4)
    bank = compute_bank(backbone, dataset, seg, version=0, batch_size=8)
    centroids = compute_centroids(backbone, dataset, bank, seg, version=0, batch_size=8)
    return backbone, dataset, seg, bank, centroids


class TestTotalLoss:
    def test_matches_module_oracles(self, prepared):
        backbone, dataset, seg, bank, centroids = prepared
        x, labels, _ = next(dataset.iter_batches(8))
        feats = [f.detach() for f in backbone(x)]
        params = CCDParams(margin=0.05, loss_weight=100.0)
        loss, parts = total_loss(feats, labels, bank, centroids, seg, params)

        expected_cka = 0.0
        for layer in (1, 2):
            segs = [flatten_for_cka(s).double() for s in split_segments(feats[layer - 1], seg, layer)]
            expected_cka += float(cka_loss_layer(segs))

        responses = batch_responses(feats, bank, seg).double()
        dists = normalize_responses(responses).numpy()
        slots = seg.slot_index()
        expected_ccd = sum(
            ccd_loss(ConceptDistribution(row, slots), label, centroids, params)
            for row, label in zip(dists, labels)
        )
        assert parts["cka"] == pytest.approx(expected_cka, rel=1e-6)
        assert parts["ccd"] == pytest.approx(expected_ccd, rel=1e-6)
        assert parts["total"] == pytest.approx(expected_cka + 100.0 * expected_ccd, rel=1e-6)

    def test_identical_segments_make_cka_term_equal_layer_count(self, prepared):
        _, _, seg, bank, centroids = prepared
        rng = np.random.default_rng(7)
        feats = []
        for layer in (1, 2):
            block = torch.tensor(rng.normal(size=(8, 4, 3, 3)), dtype=torch.float32)
            feats.append(torch.cat([block, block], dim=1))  # two identical segments
        labels = [centroids.labels[0]] * 8
        _, parts = total_loss(feats, labels, bank, centroids, seg, CCDParams(), mode="cka-only")
        assert parts["cka"] == pytest.approx(2.0, abs=1e-6)
        assert parts["ccd"] == 0.0

    def test_sample_on_centroid_with_others_beyond_margin_gives_zero_ccd(self, prepared):
        backbone, dataset, seg, bank, _ = prepared
        x, _, _ = next(dataset.iter_batches(8))
        feats = backbone(x)
        responses = batch_responses(feats, bank, seg).double().detach()
        dists = normalize_responses(responses).numpy()
        slots = seg.slot_index()

        own = dists[0]
        far = np.zeros_like(own)
        far[0] = 1.0  # one-hot, far from any real response profile
        from conceptproto.distribution import ClassCentroidSet

        centroids = ClassCentroidSet({"own": own.copy(), "far": far}, {"own": 1, "far": 1}, slots)
        params = CCDParams(margin=0.01)
        assert js_divergence(own, far) >= params.margin
        loss = ccd_loss(ConceptDistribution(own, slots), "own", centroids, params)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_single_segment_layers_contribute_nothing(self):
        torch.manual_seed(1)
        dataset = tiny_dataset()
        backbone = tiny_backbone(channels=(4, 8))
        seg = SegmentationConfig.uniform((4, 8), 4)  # layer 1 has one segment
        bank = compute_bank(backbone, dataset, seg, 0, 8)
        centroids = compute_centroids(backbone, dataset, bank, seg, 0, 8)
        x, labels, _ = next(dataset.iter_batches(8))
        feats = backbone(x)
        _, parts = total_loss(feats, labels, bank, centroids, seg, CCDParams(), mode="cka-only")
        assert len(parts["cka_per_layer"]) == 1

    def test_version_mismatch_rejected(self, prepared):
        backbone, dataset, seg, bank, centroids = prepared
        stale = copy.deepcopy(centroids)
        stale.epoch_version = 99
        x, labels, _ = next(dataset.iter_batches(8))
        feats = backbone(x)
        with pytest.raises(StaleStateError):
            total_loss(feats, labels, bank, stale, seg, CCDParams())

    def test_mode_disables_terms_exactly(self, prepared):
        backbone, dataset, seg, bank, centroids = prepared
        x, labels, _ = next(dataset.iter_batches(8))
        feats = [f.detach() for f in backbone(x)]
        params = CCDParams()
        _, both = total_loss(feats, labels, bank, centroids, seg, params, mode="both")
        _, cka_only = total_loss(feats, labels, bank, centroids, seg, params, mode="cka-only")
        _, ccd_only = total_loss(feats, labels, bank, centroids, seg, params, mode="ccd-only")
        assert cka_only["ccd"] == 0.0
        assert cka_only["total"] == pytest.approx(both["cka"], rel=1e-9)
        assert ccd_only["cka"] == 0.0
        # float32 forward: the re-scaled comparison is only good to ~1e-7
        assert ccd_only["total"] == pytest.approx(params.loss_weight * both["ccd"], rel=1e-6)


class TestRefresh:
    def test_idempotent_on_frozen_backbone(self, prepared):
        backbone, dataset, seg, _, _ = prepared
        a = compute_bank(backbone, dataset, seg, 0, 8)
        b = compute_bank(backbone, dataset, seg, 0, 8)
        for slot in a.slot_index:
            assert a.prototypes[slot].direction == pytest.approx(
                b.prototypes[slot].direction, abs=1e-8
            )

    def test_every_sample_finite_divergence_to_own_centroid(self, prepared):
        backbone, dataset, seg, bank, centroids = prepared
        from conceptproto.pipeline import dataset_distributions

        matrix, labels, _ = dataset_distributions(backbone, dataset, bank, seg, 8)
        slots = seg.slot_index()
        for row, label in zip(matrix, labels):
            dist = ConceptDistribution(row, slots)
            _, divergences = classify(dist, centroids)
            own = divergences[centroids.labels.index(label)]
            assert math.isfinite(own)

    def test_versions_synchronized_after_refresh(self, prepared):
        backbone, dataset, seg, _, _ = prepared
        state = TrainState(backbone, seg, None, None, epoch=4, classes=tuple(dataset.classes))
        refresh_globals(state, dataset, batch_size=8)
        assert state.bank.epoch_version == 4
        assert state.centroids.epoch_version == 4


class TestTrainEpoch:
    def _state(self, dataset, config, channels=(8, 8)):
        torch.manual_seed(config.seed)
        backbone = tiny_backbone(seed=config.seed, channels=channels)
        seg = SegmentationConfig.uniform(channels, 4)
        state = TrainState(backbone, seg, None, None, epoch=0, classes=tuple(dataset.classes))
        refresh_globals(state, dataset, config.batch_size)
        return state

    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        dataset = tiny_dataset()
        config = tiny_config(learning_rate=0.0)
        state = self._state(dataset, config)
        # learnable parameters only; batch-norm running statistics are
        # observations, not optimizer state, and update regardless of lr
        before = {k: v.clone() for k, v in state.backbone.named_parameters()}
        optimizer, _ = make_optimizer(state.backbone, config)
        losses = train_epoch(state, dataset, config, optimizer)
        for k, v in state.backbone.named_parameters():
            assert torch.equal(before[k], v), k
        assert math.isfinite(losses.total)
        assert state.loss_history == [losses]

    def test_prototypes_and_centroids_untouched_by_training(self):
        dataset = tiny_dataset()
        config = tiny_config()
        state = self._state(dataset, config)
        bank_before = {s: p.direction.copy() for s, p in state.bank.prototypes.items()}
        cents_before = {c: v.copy() for c, v in state.centroids.centroids.items()}
        optimizer, _ = make_optimizer(state.backbone, config)
        train_epoch(state, dataset, config, optimizer)
        for slot, d in bank_before.items():
            assert np.array_equal(state.bank.prototypes[slot].direction, d)
        for cls, v in cents_before.items():
            assert np.array_equal(state.centroids.centroids[cls], v)

    def test_requires_refresh_before_first_epoch(self):
        dataset = tiny_dataset()
        config = tiny_config()
        backbone = tiny_backbone()
        state = TrainState(backbone, SegmentationConfig.uniform((8, 8), 4), None, None)
        optimizer, _ = make_optimizer(backbone, config)
        with pytest.raises(StaleStateError):
            train_epoch(state, dataset, config, optimizer)

    def test_nan_batch_aborts_with_batch_diagnostic(self):
        dataset = tiny_dataset()
        config = tiny_config()
        state = self._state(dataset, config)

        class PoisonedDataset:
            classes = dataset.classes

            def iter_batches(self, batch_size, shuffle_seed=None, min_batch=1):
                x, labels, ids = next(dataset.iter_batches(batch_size))
                x = x.clone()
                x[0, 0, 0, 0] = float("nan")
                yield x, labels, ids

        optimizer, _ = make_optimizer(state.backbone, config)
        with pytest.raises(TrainingDivergedError, match="batch 0"):
            train_epoch(state, PoisonedDataset(), config, optimizer)


class TestFit:
    def test_cycle_ordering_and_versions(self):
        dataset = tiny_dataset()
        config = tiny_config(epochs=2)
        torch.manual_seed(config.seed)
        backbone = tiny_backbone(seed=config.seed)
        state = fit(backbone, dataset, config, SegmentationConfig.uniform((8, 8), 4))
        assert state.epoch == 2
        assert state.bank.epoch_version == 2
        assert state.centroids.epoch_version == 2
        assert [h.epoch for h in state.loss_history] == [1, 2]

    def test_seeded_runs_reproduce_loss_history(self):
        dataset = tiny_dataset()
        config = tiny_config(epochs=2)

        def run():
            torch.manual_seed(config.seed)
            backbone = tiny_backbone(seed=config.seed)
            return fit(backbone, dataset, config, SegmentationConfig.uniform((8, 8), 4))

        h1 = run().loss_history
        h2 = run().loss_history
        for a, b in zip(h1, h2):
            assert a.total == pytest.approx(b.total, abs=1e-7)
            assert a.cka == pytest.approx(b.cka, abs=1e-7)
            assert a.ccd == pytest.approx(b.ccd, abs=1e-7)


class TestGradientCheck:
    def test_report_shape_and_thresholds(self):
        report = gradient_check(seed=1, n_params=12)
        assert set(report.modes) == {"both", "cka-only", "ccd-only"}
        for mode, stats in report.modes.items():
            assert stats["n_params"] == 12
            assert stats["max_rel_error"] < 1e-4, mode
            assert stats["median_rel_error"] <= stats["max_rel_error"]
