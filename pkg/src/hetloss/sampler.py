"""Subject-disjoint, class-stratified k-fold splits and mini-batch iteration."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import Dataset, MiniBatch, partition_batch

DEFAULT_TOLERANCE = 1.2


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every subject to one of ``k`` folds.

    ``per_fold_counts[f][c]`` is the number of class-``c`` images in fold ``f``.
    ``within_tolerance`` is False when the requested ratio could not be met;
    the plan is then the best one found and ``achieved_ratio`` says how far off it is.
    """

    k: int
    seed: int
    tolerance_ratio: float
    assignment: tuple[int, ...]
    per_fold_counts: tuple[tuple[int, ...], ...]
    subject_class: tuple[int, ...]
    sample_subjects: np.ndarray | None = None

    @property
    def achieved_ratio(self) -> float:
        return max(class_ratios(self.per_fold_counts))

    @property
    def within_tolerance(self) -> bool:
        return self.achieved_ratio <= self.tolerance_ratio + 1e-12

    def fold_subjects(self, fold: int) -> list[int]:
        return [s for s, f in enumerate(self.assignment) if f == fold]

    def __eq__(self, other):
        if not isinstance(other, FoldPlan):
            return NotImplemented
        return (self.k, self.seed, self.tolerance_ratio, self.assignment,
                self.per_fold_counts, self.subject_class) == (
            other.k, other.seed, other.tolerance_ratio, other.assignment,
            other.per_fold_counts, other.subject_class)


def class_ratios(per_fold_counts) -> list[float]:
    """max/min image count over folds, one value per class (inf if a fold is empty)."""
    counts = np.asarray(per_fold_counts, dtype=float)
    out = []
    for col in counts.T:
        lo = col.min()
        out.append(float("inf") if lo == 0 else float(col.max() / lo))
    return out


def stratified_subject_folds(ds: Dataset, k: int = 7, seed: int = 0,
                             tolerance_ratio: float = DEFAULT_TOLERANCE) -> FoldPlan:
    """Greedy largest-first packing of subjects into folds, class by class,
    followed by a move/swap local search on the per-class image counts.

    Within a class, subjects are visited by descending image count and each
    goes to the fold holding the fewest images of that class so far (lowest
    fold index on ties). The seed only permutes subjects with equal counts.
    If ``tolerance_ratio`` cannot be reached the best plan found is returned
    with ``within_tolerance`` False.
    """
    if k < 1:
        raise SamplingError(f"k must be positive, got {k}")
    if tolerance_ratio < 1:
        raise SamplingError(f"tolerance_ratio must be >= 1, got {tolerance_ratio}")
    counts = ds.subject_counts()
    rng = np.random.default_rng(seed)
    assignment = np.full(ds.n_subjects, -1, dtype=np.int64)
    per_fold = np.zeros((k, ds.n_classes), dtype=np.int64)
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.subject_class == c)
        if len(members) < k:
            raise SamplingError(f"class {c} has {len(members)} subjects, fewer than k={k}")
        # random key only matters between equal counts
        tiebreak = rng.permutation(len(members))
        order = members[np.lexsort((tiebreak, -counts[members]))]
        for s in order:
            f = int(np.argmin(per_fold[:, c]))
            assignment[s] = f
            per_fold[f, c] += counts[s]
        _refine(order, counts, assignment, per_fold, c)
    return FoldPlan(
        k=k,
        seed=seed,
        tolerance_ratio=float(tolerance_ratio),
        assignment=tuple(int(a) for a in assignment),
        per_fold_counts=tuple(tuple(int(v) for v in row) for row in per_fold),
        subject_class=tuple(int(c) for c in ds.subject_class),
        sample_subjects=ds.subjects,
    )


def _ratio(col) -> float:
    lo = col.min()
    return float("inf") if lo == 0 else col.max() / lo


def _refine(members, counts, assignment, per_fold, c, max_steps: int = 2000,
            max_sideways: int = 50) -> None:
    """Local search over single moves and pairwise swaps of one class's subjects.

    Each step takes the best move or swap by (max/min ratio, spread, sum of
    squares). When nothing improves, a score-neutral change to an unvisited
    assignment is allowed (up to ``max_sideways`` in a row) to walk off
    plateaus. The best assignment seen is kept, so the result is never worse
    than the greedy start.
    """
    members = [int(s) for s in members]
    col = per_fold[:, c].copy()
    k = len(col)

    def score(v):
        return (round(_ratio(v), 12), int(v.max() - v.min()), int(np.dot(v, v)))

    current = {s: int(assignment[s]) for s in members}
    best_score, best_assign, best_col = score(col), dict(current), col.copy()
    visited = {tuple(current[s] for s in members)}
    sideways = 0
    for _ in range(max_steps):
        cur_score = score(col)
        candidates = []
        for s in members:
            fs = current[s]
            for g in range(k):
                if g != fs:
                    trial = col.copy()
                    trial[fs] -= counts[s]
                    trial[g] += counts[s]
                    candidates.append((score(trial), ((s, g),), trial))
        for i, s in enumerate(members):
            for t in members[i + 1:]:
                fs, ft = current[s], current[t]
                if fs == ft or counts[s] == counts[t]:
                    continue
                trial = col.copy()
                trial[fs] += counts[t] - counts[s]
                trial[ft] += counts[s] - counts[t]
                candidates.append((score(trial), ((s, ft), (t, fs)), trial))
        chosen = None
        for sc, moves, trial in sorted(candidates, key=lambda x: x[0]):
            if sc > cur_score:
                break
            if sc == cur_score and sideways >= max_sideways:
                break
            state = dict(current)
            for s, g in moves:
                state[s] = g
            key = tuple(state[s] for s in members)
            if key in visited:
                continue
            chosen = (sc, state, trial, key)
            break
        if chosen is None:
            break
        sc, current, col, key = chosen
        visited.add(key)
        sideways = sideways + 1 if sc == cur_score else 0
        if sc < best_score:
            best_score, best_assign, best_col = sc, dict(current), col.copy()
    for s, g in best_assign.items():
        assignment[s] = g
    per_fold[:, c] = best_col


def fold_train_val(plan: FoldPlan, fold: int, ds: Dataset | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices (train, val) where val holds every sample of the fold's subjects."""
    if not 0 <= fold < plan.k:
        raise SamplingError(f"fold {fold} out of range 0..{plan.k - 1}")
    subjects = ds.subjects if ds is not None else plan.sample_subjects
    if subjects is None:
        raise SamplingError("plan carries no sample table; pass the dataset")
    sample_fold = np.asarray(plan.assignment)[subjects]
    in_val = sample_fold == fold
    return np.flatnonzero(~in_val), np.flatnonzero(in_val)


def minibatch_iter(ds: Dataset, indices, batch_size: int, seed: int, epoch: int) -> Iterator[MiniBatch]:
    """Shuffle ``indices`` with a (seed, epoch)-keyed generator and yield batches.

    The last batch may be shorter than ``batch_size``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise SamplingError("cannot iterate over an empty index set")
    if batch_size < 1:
        raise SamplingError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = idx[rng.permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        yield partition_batch(ds, order[start:start + batch_size])


# -- manifest ---------------------------------------------------------------

def plan_to_dict(plan: FoldPlan) -> dict:
    return {
        "format": "hetloss-folds",
        "version": 1,
        "k": plan.k,
        "seed": plan.seed,
        "tolerance_ratio": plan.tolerance_ratio,
        "achieved_ratio": plan.achieved_ratio,
        "within_tolerance": plan.within_tolerance,
        "subject_class": list(plan.subject_class),
        "folds": [
            {"subjects": plan.fold_subjects(f), "class_counts": list(plan.per_fold_counts[f])}
            for f in range(plan.k)
        ],
    }


def plan_from_dict(data: dict) -> FoldPlan:
    if data.get("format") != "hetloss-folds":
        raise ValueError("not a fold manifest")
    n_s = len(data["subject_class"])
    assignment = [-1] * n_s
    for f, fold in enumerate(data["folds"]):
        for s in fold["subjects"]:
            if assignment[s] != -1:
                raise ValueError(f"subject {s} listed in folds {assignment[s]} and {f}")
            assignment[s] = f
    if -1 in assignment:
        raise ValueError(f"subject {assignment.index(-1)} missing from manifest")
    return FoldPlan(
        k=int(data["k"]),
        seed=int(data["seed"]),
        tolerance_ratio=float(data["tolerance_ratio"]),
        assignment=tuple(assignment),
        per_fold_counts=tuple(tuple(int(v) for v in fold["class_counts"]) for fold in data["folds"]),
        subject_class=tuple(int(c) for c in data["subject_class"]),
    )


def save_manifest(plan: FoldPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1) + "\n")


def load_manifest(path) -> FoldPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))
