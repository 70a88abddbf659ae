import numpy as np
import pytest
import torch

from conceptproto.backbone import BackboneSpec, build_backbone
from conceptproto.data.manifest import (
    DatasetManifest,
    Preprocessing,
    SampleRecord,
    load_dataset,
    synthetic_manifest,
)
from conceptproto.errors import ConfigurationError
from conceptproto.fewshot import FewShotSplit, fewshot_centroids, fewshot_evaluate, make_split
from conceptproto.pipeline import dataset_distributions
from conceptproto.segmentation import SegmentationConfig
from conceptproto.training import TrainState, refresh_globals


def fake_manifest(n_classes=10, per_class=8):
    classes = tuple(f"cls{i}" for i in range(n_classes))
    samples = tuple(
        SampleRecord(f"{c}-{i}", c, index=i) for c in classes for i in range(per_class)
    )
    # split logic only touches ids/labels, so a synthetic stub is enough
    return DatasetManifest("fake", "synthetic", classes, samples, generator={"per_class": per_class})


class FakeDataset:
    def __init__(self, manifest):
        self.classes = manifest.classes
        self.samples = list(manifest.samples)


class TestMakeSplit:
    def test_default_k_is_five(self):
        split = make_split(FakeDataset(fake_manifest()), unseen_fraction=0.3)
        assert split.k == 5

    def test_deterministic_under_seed(self):
        ds = FakeDataset(fake_manifest())
        a = make_split(ds, unseen_fraction=0.3, k=5, seed=12)
        b = make_split(ds, unseen_fraction=0.3, k=5, seed=12)
        assert a == b
        c = make_split(ds, unseen_fraction=0.3, k=5, seed=13)
        assert a != c

    def test_disjointness_properties(self):
        ds = FakeDataset(fake_manifest(n_classes=10, per_class=8))
        split = make_split(ds, unseen_fraction=0.3, k=5, seed=4)
        assert not set(split.seen_classes) & set(split.unseen_classes)
        assert set(split.seen_classes) | set(split.unseen_classes) == set(ds.classes)
        for cls in split.unseen_classes:
            support = set(split.support[cls])
            query = set(split.query[cls])
            assert len(support) == 5
            assert not support & query
            assert support | query == {r.id for r in ds.samples if r.label == cls}

    def test_class_with_too_few_samples_rejected(self):
        ds = FakeDataset(fake_manifest(n_classes=4, per_class=5))
        with pytest.raises(ConfigurationError, match="needs more than k"):
            make_split(ds, unseen_fraction=0.5, k=5, seed=0)

    def test_split_json_round_trip(self, tmp_path):
        split = make_split(FakeDataset(fake_manifest()), unseen_fraction=0.3, k=5, seed=2)
        path = tmp_path / "split.json"
        split.save(path)
        assert FewShotSplit.load(path) == split

    def test_overlapping_sets_rejected(self):
        with pytest.raises(ConfigurationError):
            FewShotSplit(("a",), ("a",), {"a": ("x",)}, {"a": ()}, k=1, seed=0)


@pytest.fixture(scope="module")
def trained_stub():
    """Backbone refreshed on simple synthetic data; no gradient steps needed
    for protocol-level tests."""
    torch.manual_seed(2)
    manifest = synthetic_manifest("toy", per_class=8, seed=21, image_size=16)
    dataset = load_dataset(manifest, Preprocessing(image_size=16))
    backbone = build_backbone(BackboneSpec(channels=(8, 8), strides=(2, 2), seed=2))
    state = TrainState(
        backbone, SegmentationConfig.uniform((8, 8), 4), None, None, epoch=0,
        classes=tuple(dataset.classes),
    )
    refresh_globals(state, dataset, batch_size=8)
    return state, dataset


def support_pass(state, dataset, split):
    """Distributions of every support sample from the same batched pass the
    centroid builder uses (float32 forwards differ slightly across batch
    layouts, so the oracle must share the layout)."""
    ids = [sid for cls in split.unseen_classes for sid in split.support[cls]]
    matrix, labels, out_ids = dataset_distributions(
        state.backbone, dataset.subset(ids), state.bank, state.seg_config, 32
    )
    return matrix, labels, out_ids


class TestFewshotCentroids:
    def test_k1_centroid_equals_single_support_distribution(self, trained_stub):
        state, dataset = trained_stub
        split = make_split(dataset, unseen_fraction=1 / 3, k=1, seed=7)
        centroids = fewshot_centroids(state, dataset, split)
        matrix, labels, _ = support_pass(state, dataset, split)
        for cls in split.unseen_classes:
            (row,) = [m for m, l in zip(matrix, labels) if l == cls]
            assert centroids.centroid(cls) == pytest.approx(row, abs=1e-12)

    def test_k5_matches_brute_force_mean(self, trained_stub):
        state, dataset = trained_stub
        split = make_split(dataset, unseen_fraction=1 / 3, k=5, seed=8)
        centroids = fewshot_centroids(state, dataset, split)
        matrix, labels, _ = support_pass(state, dataset, split)
        for cls in split.unseen_classes:
            rows = np.stack([m for m, l in zip(matrix, labels) if l == cls])
            assert rows.shape[0] == 5
            assert centroids.centroid(cls) == pytest.approx(rows.mean(axis=0), abs=1e-12)

    def test_centroid_pool_is_unseen_only(self, trained_stub):
        state, dataset = trained_stub
        split = make_split(dataset, unseen_fraction=1 / 3, k=2, seed=9)
        centroids = fewshot_centroids(state, dataset, split)
        assert set(centroids.labels) == set(split.unseen_classes)


class TestFewshotEvaluate:
    def test_bank_version_unchanged(self, trained_stub):
        state, dataset = trained_stub
        version = state.bank.epoch_version
        split = make_split(dataset, unseen_fraction=1 / 3, k=2, seed=10)
        fewshot_evaluate(state, dataset, split, batch_size=8)
        assert state.bank.epoch_version == version

    def test_query_equal_support_scores_perfectly(self, trained_stub):
        # self-support sanity: score the supports against the centroids they
        # themselves built; each sits at minimal divergence from its class
        from conceptproto.distribution import ConceptDistribution, classify

        state, dataset = trained_stub
        split = make_split(dataset, unseen_fraction=1 / 3, k=2, seed=11)
        centroids = fewshot_centroids(state, dataset, split)
        matrix, labels, _ = support_pass(state, dataset, split)
        slots = state.seg_config.slot_index()
        hits = sum(
            classify(ConceptDistribution(row, slots), centroids)[0] == label
            for row, label in zip(matrix, labels)
        )
        assert hits == len(labels)

    def test_determinism_and_counting(self, trained_stub):
        state, dataset = trained_stub
        split = make_split(dataset, unseen_fraction=1 / 3, k=3, seed=12)
        a = fewshot_evaluate(state, dataset, split, batch_size=8)
        b = fewshot_evaluate(state, dataset, split, batch_size=8)
        assert a.accuracy == b.accuracy
        correct = sum(p["predicted"] == p["true"] for p in a.predictions)
        assert a.accuracy == pytest.approx(correct / a.n_query)
        assert a.n_query == sum(len(split.query[c]) for c in split.unseen_classes)
