import itertools
from collections import Counter

import numpy as np
import pytest

from hetloss.sampler import (SamplingError, class_ratios, fold_train_val, load_manifest,
                             minibatch_iter, save_manifest, stratified_subject_folds)
from hetloss.synthdata import GenConfig, benchmark_preset, generate

from conftest import make_dataset


def exhaustive_best_ratio(counts, k):
    best = float("inf")
    for assign in itertools.product(range(k), repeat=len(counts)):
        totals = np.bincount(assign, weights=counts, minlength=k)
        if totals.min() > 0:
            best = min(best, totals.max() / totals.min())
    return best


def large_cohort(seed):
    """41 + 60 subjects with 4037 and 8491 images per class."""
    return generate(GenConfig(d=4, subjects_per_class=(41, 60), min_images=20, max_images=400,
                              class_imbalance_ratio=8491 / 4037, seed=seed))[0]


class TestStratifiedFolds:
    def test_symmetric_two_folds(self):
        ds = make_dataset([0, 0, 1, 1], [5, 5, 7, 7])
        plan = stratified_subject_folds(ds, k=2, seed=0)
        assert plan.per_fold_counts == ((5, 7), (5, 7))
        assert plan.achieved_ratio == 1.0

    def test_near_exhaustive_optimum(self):
        counts = [9, 8, 7, 6, 5, 4, 3, 2, 1]
        ds = make_dataset([0] * 9 + [1] * 3, counts + [4, 4, 4])
        plan = stratified_subject_folds(ds, k=3, seed=0)
        greedy = class_ratios(plan.per_fold_counts)[0]
        optimum = exhaustive_best_ratio(counts, 3)
        assert optimum == 1.0
        assert greedy <= 1.1 * optimum

    @pytest.mark.parametrize("seed", range(5))
    def test_large_cohort_balance(self, seed):
        ds = large_cohort(seed)
        totals = np.bincount(ds.classes)
        assert abs(totals[1] / totals[0] - 8491 / 4037) < 0.1 * 8491 / 4037
        plan = stratified_subject_folds(ds, k=7, seed=seed)
        cancer = [row[1] for row in plan.per_fold_counts]
        # reference fold spread 1135..1275, max/min about 1.123
        assert max(cancer) / min(cancer) <= 1275 / 1135
        assert plan.within_tolerance

    def test_every_subject_assigned_once(self, small_ds):
        plan = stratified_subject_folds(small_ds, k=3, seed=2)
        assert len(plan.assignment) == small_ds.n_subjects
        assert set(plan.assignment) == {0, 1, 2}
        per_fold = np.zeros((3, 2), int)
        for s, f in enumerate(plan.assignment):
            per_fold[f, small_ds.subject_class[s]] += small_ds.subject_counts()[s]
        assert per_fold.tolist() == [list(r) for r in plan.per_fold_counts]

    def test_too_few_subjects(self):
        ds = make_dataset([0, 0, 1, 1, 1], [3, 3, 3, 3, 3])
        with pytest.raises(SamplingError, match="class 0"):
            stratified_subject_folds(ds, k=3, seed=0)

    def test_unattainable_tolerance_is_flagged(self):
        ds = make_dataset([0, 0, 1, 1], [10, 1, 5, 5])
        plan = stratified_subject_folds(ds, k=2, seed=0, tolerance_ratio=1.2)
        assert not plan.within_tolerance
        assert plan.achieved_ratio == 10.0

    def test_reproducible(self):
        ds, _ = generate(benchmark_preset(4))
        assert stratified_subject_folds(ds, 7, 9) == stratified_subject_folds(ds, 7, 9)

    def test_seed_only_breaks_ties(self):
        ds = make_dataset([0] * 6 + [1] * 2, [4] * 6 + [3, 3])
        a = stratified_subject_folds(ds, k=2, seed=0)
        b = stratified_subject_folds(ds, k=2, seed=1)
        assert a.per_fold_counts == b.per_fold_counts


class TestFoldTrainVal:
    def test_val_is_fold_subjects(self):
        ds = make_dataset([0, 0, 1, 1], [5, 5, 7, 7])
        plan = stratified_subject_folds(ds, k=2, seed=0)
        train, val = fold_train_val(plan, 0, ds)
        expected = np.flatnonzero(np.isin(ds.subjects, plan.fold_subjects(0)))
        assert val.tolist() == expected.tolist()
        assert len(np.intersect1d(train, val)) == 0
        assert len(train) + len(val) == len(ds)

    def test_no_subject_leakage(self):
        ds, _ = generate(benchmark_preset(8))
        plan = stratified_subject_folds(ds, k=7, seed=8)
        train, val = fold_train_val(plan, 3, ds)
        train_subjects = {int(ds.subjects[i]) for i in train}
        for i in val:
            assert int(ds.subjects[i]) not in train_subjects

    def test_out_of_range(self, small_ds):
        plan = stratified_subject_folds(small_ds, k=2, seed=0)
        with pytest.raises(SamplingError):
            fold_train_val(plan, 2, small_ds)


class TestMinibatchIter:
    def test_sizes(self):
        ds = make_dataset([0, 1, 0], [11, 11, 11])
        sizes = [b.size for b in minibatch_iter(ds, np.arange(33), 16, seed=0, epoch=0)]
        assert sizes == [16, 16, 1]

    def test_deterministic(self, small_ds):
        idx = np.arange(len(small_ds))
        a = [b.indices.tolist() for b in minibatch_iter(small_ds, idx, 16, 3, 1)]
        b = [b.indices.tolist() for b in minibatch_iter(small_ds, idx, 16, 3, 1)]
        assert a == b

    def test_epochs_differ_but_cover_same_multiset(self, small_ds):
        idx = np.arange(0, len(small_ds), 2)
        e0 = np.concatenate([b.indices for b in minibatch_iter(small_ds, idx, 16, 3, 0)])
        e1 = np.concatenate([b.indices for b in minibatch_iter(small_ds, idx, 16, 3, 1)])
        assert e0.tolist() != e1.tolist()
        assert Counter(e0.tolist()) == Counter(e1.tolist()) == Counter(idx.tolist())

    def test_empty(self, small_ds):
        with pytest.raises(SamplingError):
            list(minibatch_iter(small_ds, [], 16, 0, 0))


def test_manifest_round_trip(tmp_path):
    ds, _ = generate(benchmark_preset(2))
    plan = stratified_subject_folds(ds, k=7, seed=2)
    path = tmp_path / "folds.json"
    save_manifest(plan, path)
    back = load_manifest(path)
    assert back == plan
    save_manifest(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()
    train, val = fold_train_val(back, 0, ds)
    assert len(train) + len(val) == len(ds)
