import csv

import numpy as np
import pytest

from conceptproto.distribution import ClassCentroidSet
from conceptproto.reports import (
    null_prototype_report,
    read_loss_csv,
    write_discriminativeness_csv,
    write_distribution_csv,
    write_loss_csv,
    write_similarity_outputs,
)
from conceptproto.segmentation import SegmentationConfig
from conceptproto.training import EpochLosses


def test_loss_csv_round_trip_preserves_floats(tmp_path):
    history = [EpochLosses(1, 1 / 3, 2 / 7, 100.123456789), EpochLosses(2, 0.1, 0.2, 0.3)]
    path = tmp_path / "losses.csv"
    write_loss_csv(history, path)
    rows = read_loss_csv(path)
    assert rows[0] == (1, 1 / 3, 2 / 7, 100.123456789)
    assert rows[1] == (2, 0.1, 0.2, 0.3)


def test_similarity_outputs_layout(tmp_path):
    per_layer = [
        (np.array([[1.0, 0.25], [0.25, 1.0]]), 0.25),
        (np.ones((1, 1)), float("nan")),
    ]
    cfg = SegmentationConfig((16, 8), (8, 8))
    out = write_similarity_outputs(per_layer, cfg, tmp_path)
    assert (tmp_path / "layer1_similarity.csv").is_file()
    assert (tmp_path / "layer2_similarity.png").is_file()
    with open(tmp_path / "layer1_similarity.csv") as fh:
        reader = csv.reader(fh)
        assert next(reader) == ["segment1", "segment2"]
        assert [float(v) for v in next(reader)] == [1.0, 0.25]
    with open(tmp_path / "upper_triangle_means.csv") as fh:
        reader = csv.reader(fh)
        next(reader)
        assert float(next(reader)[1]) == 0.25
        assert next(reader)[1] == "nan"
    assert out["means"][0] == 0.25


def test_distribution_csv_header_uses_slot_names(tmp_path):
    matrix = np.array([[0.6, 0.4], [0.3, 0.7]])
    write_distribution_csv(matrix, ["s1", "s2"], ((1, 1), (2, 1)), tmp_path / "d.csv")
    with open(tmp_path / "d.csv") as fh:
        reader = csv.reader(fh)
        assert next(reader) == ["sample_id", "layer1.segment1", "layer2.segment1"]
        row = next(reader)
        assert row[0] == "s1"
        assert float(row[1]) == 0.6


def test_discriminativeness_csv(tmp_path):
    cs = ClassCentroidSet(
        {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])},
        {"a": 1, "b": 1},
        ((1, 1), (1, 2)),
    )
    spread = write_discriminativeness_csv(cs, tmp_path / "disc.csv")
    assert spread == pytest.approx([0.5, 0.5])
    with open(tmp_path / "disc.csv") as fh:
        reader = csv.reader(fh)
        next(reader)
        assert next(reader) == ["layer1.segment1", "0.5"]


def test_null_prototype_report_thresholding():
    responses = np.array([[0.9, 0.4], [0.7, 0.5]])
    out = null_prototype_report(responses, ((1, 1), (1, 2)), threshold=0.55)
    assert out["null_prototypes"] == [{"slot": "layer1.segment2", "max_response": 0.5}]
    out_all = null_prototype_report(responses, ((1, 1), (1, 2)), threshold=0.95)
    assert len(out_all["null_prototypes"]) == 2
