import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bicdefense.data import (
    CONTINUOUS,
    COUNT,
    DataFormatError,
    Dataset,
    Scaler,
    concatenate,
    dumps_dataset,
    load_dataset,
    parse_sparse_line,
    save_dataset,
)


def test_dense_csv_three_lines(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,a,b\n1,0.5,1.5\n2,1.0,-2\n1,3,4\n")
    data = load_dataset(p)
    assert (data.T, data.d) == (3, 2)
    assert data.feature_kind == CONTINUOUS
    np.testing.assert_array_equal(data.labels, [1, 2, 1])
    np.testing.assert_array_equal(data.X[1], [1.0, -2.0])


def test_label_column_anywhere_and_poison_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,poison\n0.1,2,1\n0.2,1,0\n")
    data = load_dataset(p)
    np.testing.assert_array_equal(data.labels, [2, 1])
    np.testing.assert_array_equal(data.poison_truth, [True, False])
    assert data.d == 1


def test_sparse_line_example():
    label, entries = parse_sparse_line("2 1:3 7:1")
    assert label == 2
    assert entries == {1: 3, 7: 1}


def test_sparse_file_to_count_vectors(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("2 1:3 7:1\n1 2:1\n")
    data = load_dataset(p)
    assert data.feature_kind == COUNT
    assert data.d == 7
    np.testing.assert_array_equal(data.X[0], [3, 0, 0, 0, 0, 0, 1])


def test_duplicate_sparse_index_names_line(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("1 1:1\n1 2:1 2:4\n")
    with pytest.raises(DataFormatError, match=r":2:.*duplicate"):
        load_dataset(p)


@pytest.mark.parametrize("line", ["1 3:1 2:1", "1 0:2", "1 2:1.5", "1 2:-1", "1 2", "x 1:1"])
def test_malformed_sparse_lines(tmp_path, line):
    p = tmp_path / "d.txt"
    p.write_text(f"1 1:1\n{line}\n")
    with pytest.raises(DataFormatError, match=r":2:"):
        load_dataset(p)


def test_empty_document_rejected(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("1 1:1\n2 3:0\n")
    with pytest.raises(DataFormatError, match="empty document"):
        load_dataset(p)


def test_csv_errors_are_line_addressed(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,a\n1,0.5\n1,abc\n")
    with pytest.raises(DataFormatError, match=r":3:"):
        load_dataset(p)
    p.write_text("label,a\n1,0.5\n1\n")
    with pytest.raises(DataFormatError, match=r":3:"):
        load_dataset(p)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,a\n1,0.5\n0,1\n")
    with pytest.raises(DataFormatError, match=r":3: label 0"):
        load_dataset(p)
    p.write_text("label,a\n1,0.5\n3,1\n")
    with pytest.raises(DataFormatError, match=r":3: label 3"):
        load_dataset(p, n_classes=2)


def test_header_needs_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataFormatError, match="label"):
        load_dataset(p)


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((0, 2)), np.zeros(0, int))
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), [1])
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), [1, 3], n_classes=2)
    with pytest.raises(DataFormatError):
        Dataset(-np.ones((2, 2)), [1, 2], COUNT)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2)), [1, 2], COUNT)
    with pytest.raises(DataFormatError):
        Dataset(np.ones((2, 2)), [1, 2], poison_truth=[True])


def test_subset_keeps_ids_and_truth():
    data = Dataset(np.arange(8.0).reshape(4, 2), [1, 2, 1, 2], poison_truth=[0, 1, 0, 1])
    sub = data.subset(np.array([False, True, True, False]))
    np.testing.assert_array_equal(sub.ids, [1, 2])
    np.testing.assert_array_equal(sub.poison_truth, [True, False])
    assert sub.n_classes == 2
    np.testing.assert_array_equal(data.class_counts(), [2, 2])


def test_concatenate_renumbers_ids():
    a = Dataset(np.ones((2, 1)), [1, 1], n_classes=2)
    b = Dataset(np.zeros((1, 1)), [2], n_classes=2, poison_truth=[True])
    c = concatenate([a, b])
    np.testing.assert_array_equal(c.ids, [0, 1, 2])
    np.testing.assert_array_equal(c.poison_truth, [False, False, True])


def test_scaler_maps_to_centred_unit_range():
    X = np.array([[0.0, 5.0], [2.0, 5.0], [4.0, 5.0]])
    s = Scaler().fit(X)
    Z = s.transform(X)
    np.testing.assert_allclose(Z[:, 0], [-0.5, 0.0, 0.5])
    np.testing.assert_allclose(Z[:, 1], 0.0)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    again = Scaler.from_dict(s.to_dict())
    np.testing.assert_array_equal(again.transform(X), Z)


def test_scaler_unfitted():
    with pytest.raises(RuntimeError):
        Scaler().transform(np.ones((1, 1)))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), finite, finite), min_size=1, max_size=15))
def test_dense_round_trip(tmp_path_factory, rows):
    labels = [r[0] for r in rows]
    data = Dataset(np.array([r[1:] for r in rows]), labels, CONTINUOUS, 3)
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    save_dataset(data, p)
    back = load_dataset(p, n_classes=3)
    assert back.same_content(data)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 2), st.lists(st.integers(0, 9), min_size=6, max_size=6)),
                min_size=1, max_size=15))
def test_sparse_round_trip(tmp_path_factory, rows):
    X = np.array([r[1] for r in rows], float)
    X[X.sum(axis=1) == 0, 2] = 1
    data = Dataset(X, [r[0] for r in rows], COUNT, 2)
    p = tmp_path_factory.mktemp("rt") / "d.txt"
    save_dataset(data, p)
    back = load_dataset(p, n_classes=2)
    assert back.same_content(data)


def test_sparse_writer_rejects_dense():
    with pytest.raises(DataFormatError):
        dumps_dataset(Dataset(np.ones((1, 2)), [1]), "sparse")
