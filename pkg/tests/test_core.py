import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetloss.core import (Dataset, Sample, load_dataset, partition_batch, save_dataset,
                          validate_dataset)
from hetloss.synthdata import benchmark_preset, generate

from conftest import make_dataset


class TestValidateDataset:
    def test_well_formed(self):
        ds = make_dataset([0, 0, 1], [2, 3, 2])
        assert validate_dataset(ds) == []

    def test_subject_with_two_classes(self):
        ds = make_dataset([0, 0, 1], [2, 3, 2])
        classes = ds.classes.copy()
        classes[2] = 1  # first row of subject 1
        bad = Dataset(ds.features, ds.subjects, classes, ds.subject_class, 2)
        report = validate_dataset(bad)
        assert len(report) == 1
        assert report[0].startswith("subject 1")

    def test_nan_feature(self):
        ds = make_dataset([0, 0, 1], [2, 3, 2])
        feats = ds.features.copy()
        feats[4, 1] = np.nan
        report = validate_dataset(Dataset(feats, ds.subjects, ds.classes, ds.subject_class, 2))
        assert len(report) == 1
        assert report[0].startswith("sample 4")

    def test_single_class_and_missing_class(self):
        ds = make_dataset([0, 0], [2, 2])
        assert any("at least two classes" in r for r in validate_dataset(ds))
        ds3 = Dataset(ds.features, ds.subjects, ds.classes, [0, 0], 3)
        assert any(r.startswith("class 1") for r in validate_dataset(ds3))

    def test_out_of_range_subject(self):
        ds = make_dataset([0, 1], [2, 2])
        subj = ds.subjects.copy()
        subj[0] = 5
        report = validate_dataset(Dataset(ds.features, subj, ds.classes, ds.subject_class, 2))
        assert report == ["sample 0: subject id 5 outside 0..1"]

    def test_from_samples(self):
        samples = [Sample(np.array([1.0, 2.0]), 0, 0), Sample(np.array([3.0, 4.0]), 1, 1)]
        ds = Dataset.from_samples(samples, [0, 1])
        assert ds.n_classes == 2 and ds.dim == 2 and len(ds) == 2
        assert ds.sample(1).label == 1
        assert validate_dataset(ds) == []

    def test_immutable(self):
        ds = make_dataset([0, 1], [2, 2])
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0


class TestPartitionBatch:
    def test_four_singletons(self):
        ds = make_dataset([0, 0, 1, 1], [1, 1, 1, 1])
        b = partition_batch(ds, [0, 1, 2, 3])
        assert {c: v.tolist() for c, v in b.by_class.items()} == {0: [0, 1], 1: [2, 3]}
        assert {s: v.tolist() for s, v in b.by_subject.items()} == {0: [0], 1: [1], 2: [2], 3: [3]}

    def test_single_subject(self):
        ds = make_dataset([0, 1], [5, 3])
        b = partition_batch(ds, [4, 2, 0])
        assert list(b.by_subject) == [0]
        assert b.by_subject[0].tolist() == [4, 2, 0]

    def test_out_of_range(self):
        ds = make_dataset([0, 1], [2, 2])
        with pytest.raises(IndexError, match="7"):
            partition_batch(ds, [0, 7])

    def test_matches_brute_force_filter(self):
        ds, _ = generate(benchmark_preset(3))
        idx = np.random.default_rng(0).choice(len(ds), 16, replace=False)
        b = partition_batch(ds, idx)
        for c in range(ds.n_classes):
            expected = [i for i in idx if ds.classes[i] == c]
            assert b.by_class.get(c, np.array([], int)).tolist() == expected
        for s in range(ds.n_subjects):
            expected = [i for i in idx if ds.subjects[i] == s]
            assert b.by_subject.get(s, np.array([], int)).tolist() == expected
        for c, rows in b.class_rows.items():
            assert idx[rows].tolist() == b.by_class[c].tolist()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 39), min_size=1, max_size=20))
    def test_exact_partition(self, idx):
        ds = make_dataset([0, 1, 0, 1, 1], [8, 8, 8, 8, 8])
        b = partition_batch(ds, idx)
        assert sum(len(v) for v in b.by_class.values()) == len(idx)
        assert sum(len(v) for v in b.by_subject.values()) == len(idx)
        assert sorted(np.concatenate(list(b.by_subject.values())).tolist()) == sorted(idx)
        again = partition_batch(ds, idx)
        assert all(np.array_equal(again.by_subject[s], b.by_subject[s]) for s in b.by_subject)


def test_text_round_trip(tmp_path):
    ds, _ = generate(benchmark_preset(5))
    path = tmp_path / "ds.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.subjects, ds.subjects)
    assert np.array_equal(back.classes, ds.classes)
    assert np.array_equal(back.subject_class, ds.subject_class)
    np.testing.assert_allclose(back.features, ds.features, rtol=1e-12, atol=0)
    header = path.read_text().splitlines()[1]
    assert header == f"d=16 n_c=2 n_s={ds.n_subjects}"
    save_dataset(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_load_rejects_bad_width(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# hetloss-dataset v1\nd=2 n_c=2 n_s=2\nsubject_class=0,1\n0,0,1.0\n")
    with pytest.raises(ValueError, match="features"):
        load_dataset(p)


def test_select_subjects_renumbers():
    ds = make_dataset([0, 1, 0, 1], [2, 3, 4, 5])
    sub = ds.select_subjects([3, 0])
    assert sub.subject_class.tolist() == [1, 0]
    assert len(sub) == 7 and sorted(set(sub.subjects.tolist())) == [0, 1]
    np.testing.assert_array_equal(sub.features[sub.subjects == 0], ds.features[ds.subjects == 3])
    assert validate_dataset(sub) == []
    with pytest.raises(ValueError):
        ds.select_subjects([1, 1])
