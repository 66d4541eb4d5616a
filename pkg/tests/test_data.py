import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprobust import data as D


def test_zero_spread_puts_points_on_centroids():
    data, gt = D.synth_clusters(4, 3, 5, 0.0, seed=2)
    np.testing.assert_array_equal(data.instances, gt.centroids[data.labels])
    assert all(gt.classify(x) == y for x, y in zip(data.instances, data.labels))


def test_synth_is_seeded():
    a, ga = D.synth_clusters(2, 2, 10, 0.05, seed=9)
    b, gb = D.synth_clusters(2, 2, 10, 0.05, seed=9)
    np.testing.assert_array_equal(a.instances, b.instances)
    np.testing.assert_array_equal(ga.centroids, gb.centroids)


def test_synth_ten_class_accuracy():
    data, gt = D.synth_clusters(10, 8, 100, 0.02, seed=1)
    assert gt.margin > 10 * 0.02
    pred = np.array([gt.classify(x) for x in data.instances])
    assert np.mean(pred == data.labels) == 1.0


def test_synth_rejects_bad_sizes():
    with pytest.raises(D.DatasetError):
        D.synth_clusters(1, 2, 3, 0.1, seed=0)
    with pytest.raises(D.DatasetError):
        D.synth_clusters(3, 2, 3, -0.1, seed=0)


def test_ground_truth_centroid_and_tie():
    gt = D.GroundTruth(centroids=np.array([[0.0, 0.0], [0.25, 0.25], [0.875, 0.875], [0.5, 0.125], [0.75, 0.75]]))
    assert D.ground_truth_class(gt, [0.5, 0.125]) == 3
    # equidistant between centroids 1 and 4
    assert gt.classify([0.5, 0.5]) == 1


def test_ground_truth_matches_distance_scan(rng):
    data, gt = D.synth_clusters(6, 4, 2, 0.05, seed=3)
    for _ in range(500):
        x = rng.random(4)
        dists = [sum((x[j] - c[j]) ** 2 for j in range(4)) for c in gt.centroids]
        assert gt.classify(x) == min(range(6), key=lambda k: (dists[k], k))


def test_member_ground_truth_radius():
    data = D.LabeledDataset([[0.1, 0.1], [0.8, 0.8]], [0, 1], 2)
    gt = D.GroundTruth.from_dataset(data, stability_radius=0.05)
    assert gt.classify([0.12, 0.14]) == 0
    assert gt.classify([0.5, 0.5]) is None


def test_dataset_validation():
    with pytest.raises(D.DatasetError):
        D.LabeledDataset([[0.5, 1.2]], [0], 1)
    with pytest.raises(D.DatasetError):
        D.LabeledDataset([[0.5, 0.2]], [3], 2)
    with pytest.raises(D.DatasetError):
        D.LabeledDataset([[0.5, 0.2]], [0, 1], 2)


def write(path, text):
    path.write_text(text)
    return path


def test_load_csv_basic(tmp_path):
    p = write(tmp_path / "a.csv", "label,f0,f1\n0,0.1,0.2\n1,0.3,0.4\n0,0.5,0.6\n")
    data = D.load_csv(p)
    assert len(data) == 3 and data.class_count == 2
    np.testing.assert_array_equal(data.labels, [0, 1, 0])
    np.testing.assert_array_equal(data.instances[2], [0.5, 0.6])


def test_load_csv_out_of_range_names_row(tmp_path):
    p = write(tmp_path / "b.csv", "label,f0\n0,0.1\n1,1.5\n")
    with pytest.raises(D.DatasetError, match="row 3"):
        D.load_csv(p)


def test_load_csv_parse_error_names_row(tmp_path):
    p = write(tmp_path / "c.csv", "label,f0\n0,abc\n")
    with pytest.raises(D.DatasetError, match="row 2"):
        D.load_csv(p)


def test_load_csv_empty(tmp_path):
    with pytest.raises(D.DatasetError, match="empty"):
        D.load_csv(write(tmp_path / "d.csv", "label,f0,f1\n"))
    with pytest.raises(D.DatasetError):
        D.load_csv(write(tmp_path / "e.csv", "f0,label\n0.1,0\n"))


def test_csv_roundtrip(tmp_path):
    data, _ = D.synth_clusters(3, 4, 5, 0.05, seed=0)
    D.write_csv(data, tmp_path / "r.csv")
    back = D.load_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.instances, data.instances)
    np.testing.assert_array_equal(back.labels, data.labels)


def test_split_all_train():
    data, _ = D.synth_clusters(3, 2, 4, 0.05, seed=0)
    train, test, val = D.split(data, (1.0, 0.0, 0.0), seed=1)
    assert len(test) == len(val) == 0
    assert sorted(map(tuple, train.instances)) == sorted(map(tuple, data.instances))


def test_split_counts_per_class():
    data, _ = D.synth_clusters(4, 2, 100, 0.05, seed=0)
    parts = D.split(data, (0.7, 0.2, 0.1), seed=1)
    for part, n in zip(parts, (70, 20, 10)):
        np.testing.assert_array_equal(part.class_counts(), [n] * 4)


def test_split_is_seeded_and_disjoint():
    data, _ = D.synth_clusters(3, 3, 20, 0.05, seed=0)
    a = D.split(data, (0.7, 0.2, 0.1), seed=5)
    b = D.split(data, (0.7, 0.2, 0.1), seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.instances, y.instances)
    rows = [tuple(r) for part in a for r in part.instances]
    assert sorted(rows) == sorted(map(tuple, data.instances))


def test_split_errors():
    data = D.LabeledDataset([[0.1], [0.2], [0.3]], [0, 0, 1], 2)
    with pytest.raises(D.DatasetError, match="class 0"):
        D.split(data, (0.7, 0.2, 0.1), seed=0)
    with pytest.raises(D.DatasetError):
        D.split(data, (0.5, 0.2, 0.1), seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000))
def test_split_partitions_exactly(n, seed):
    labels = np.arange(n) % 2
    data = D.LabeledDataset(np.linspace(0, 1, n)[:, None], labels, 2)
    parts = D.split(data, (0.6, 0.3, 0.1), seed=seed) if min(np.bincount(labels)) >= 3 else None
    if parts is None:
        return
    assert sum(len(p) for p in parts) == n
    merged = np.sort(np.concatenate([p.instances[:, 0] for p in parts]))
    np.testing.assert_array_equal(merged, np.sort(data.instances[:, 0]))
