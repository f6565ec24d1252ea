"""Dataset containers, validation and mini-batch partitioning.

Samples are stored column-wise (one feature matrix plus two integer label
arrays) so that the loss code can index class and subject subsets directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    subject: int
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with per-sample subject and class ids.

    ``subject_class[s]`` is the diagnosis of subject ``s``; a well-formed
    dataset has ``classes[i] == subject_class[subjects[i]]`` for every sample.
    Construction does not enforce the invariants, use :func:`validate_dataset`.
    """

    features: np.ndarray
    subjects: np.ndarray
    classes: np.ndarray
    subject_class: np.ndarray
    n_classes: int

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        subj = np.asarray(self.subjects, dtype=np.int64).reshape(-1)
        cls = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if not (len(subj) == len(cls) == feats.shape[0]):
            raise ValueError("features, subjects and classes must have equal length")
        sc = np.asarray(self.subject_class, dtype=np.int64).reshape(-1)
        for arr in (feats, subj, cls, sc):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "subjects", subj)
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "subject_class", sc)
        object.__setattr__(self, "n_classes", int(self.n_classes))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], subject_class, n_classes: int | None = None):
        sc = np.asarray(subject_class, dtype=np.int64)
        if n_classes is None:
            n_classes = int(sc.max()) + 1 if len(sc) else 0
        if samples:
            feats = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
        else:
            feats = np.zeros((0, 0))
        return cls(
            features=feats,
            subjects=np.array([s.subject for s in samples], dtype=np.int64),
            classes=np.array([s.label for s in samples], dtype=np.int64),
            subject_class=sc,
            n_classes=n_classes,
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_class)

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.subjects[i]), int(self.classes[i]))

    def subset(self, indices) -> "Dataset":
        """Rows ``indices`` with subject/class id spaces left untouched."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.subjects[idx], self.classes[idx],
                       self.subject_class, self.n_classes)

    def select_subjects(self, subjects) -> "Dataset":
        """All samples of ``subjects``, renumbered to 0..len(subjects)-1 in the given order."""
        keep = np.asarray(subjects, dtype=np.int64)
        if len(np.unique(keep)) != len(keep):
            raise ValueError("duplicate subject ids")
        new_id = np.full(self.n_subjects, -1, dtype=np.int64)
        new_id[keep] = np.arange(len(keep))
        rows = np.flatnonzero(new_id[self.subjects] >= 0)
        return Dataset(self.features[rows], new_id[self.subjects[rows]], self.classes[rows],
                       self.subject_class[keep], self.n_classes)

    def subject_counts(self) -> np.ndarray:
        return np.bincount(self.subjects, minlength=self.n_subjects)


@dataclass(frozen=True)
class MiniBatch:
    """Batch of dataset indices with its class (M_c) and subject (M_s) subsets.

    ``class_rows``/``subject_rows`` hold the same subsets as positions into
    ``indices``, i.e. rows of the batch feature matrix.
    """

    indices: np.ndarray
    by_class: dict[int, np.ndarray] = field(default_factory=dict)
    by_subject: dict[int, np.ndarray] = field(default_factory=dict)
    class_rows: dict[int, np.ndarray] = field(default_factory=dict)
    subject_rows: dict[int, np.ndarray] = field(default_factory=dict)
    row_classes: np.ndarray | None = None
    row_subjects: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def present_subjects(self) -> list[int]:
        return list(self.by_subject)


def validate_dataset(ds: Dataset) -> list[str]:
    """Return one human-readable line per invariant violation (empty if clean)."""
    problems: list[str] = []
    n_c, n_s = ds.n_classes, ds.n_subjects
    if n_c < 2:
        problems.append(f"n_c={n_c}: at least two classes are required")
    for s, c in enumerate(ds.subject_class):
        if not 0 <= c < n_c:
            problems.append(f"subject {s}: class id {c} outside 0..{n_c - 1}")
    missing = sorted(set(range(n_c)) - set(int(c) for c in ds.subject_class))
    for c in missing:
        problems.append(f"class {c}: no subject carries this class")

    bad_rows = np.flatnonzero(~np.isfinite(ds.features).all(axis=1)) if len(ds) else []
    for i in bad_rows:
        problems.append(f"sample {i}: non-finite feature value")

    out_of_range = (ds.subjects < 0) | (ds.subjects >= n_s)
    for i in np.flatnonzero(out_of_range):
        problems.append(f"sample {i}: subject id {ds.subjects[i]} outside 0..{n_s - 1}")
    bad_cls = (ds.classes < 0) | (ds.classes >= n_c)
    for i in np.flatnonzero(bad_cls):
        problems.append(f"sample {i}: class id {ds.classes[i]} outside 0..{n_c - 1}")

    ok = ~out_of_range
    mismatch = np.zeros(len(ds), dtype=bool)
    mismatch[ok] = ds.subject_class[ds.subjects[ok]] != ds.classes[ok]
    for s in np.unique(ds.subjects[mismatch]):
        seen = sorted(set(ds.classes[ds.subjects == s].tolist()))
        problems.append(
            f"subject {s}: samples carry classes {seen}, expected only {ds.subject_class[s]}"
        )
    return problems


def partition_batch(ds: Dataset, indices: Iterable[int]) -> MiniBatch:
    """Split a batch into per-class and per-subject index subsets.

    Subsets keep the input order, and the keys appear in order of first
    occurrence in the batch.
    """
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices,
                     dtype=np.int64).reshape(-1)
    n = len(ds)
    bad = np.flatnonzero((idx < 0) | (idx >= n))
    if len(bad):
        raise IndexError(f"batch index {idx[bad[0]]} out of range for dataset of size {n}")
    row_classes = ds.classes[idx]
    row_subjects = ds.subjects[idx]
    class_rows: dict[int, list[int]] = {}
    subject_rows: dict[int, list[int]] = {}
    for row, (c, s) in enumerate(zip(row_classes.tolist(), row_subjects.tolist())):
        class_rows.setdefault(c, []).append(row)
        subject_rows.setdefault(s, []).append(row)
    class_rows = {c: np.array(v, dtype=np.int64) for c, v in class_rows.items()}
    subject_rows = {s: np.array(v, dtype=np.int64) for s, v in subject_rows.items()}
    return MiniBatch(
        indices=idx,
        by_class={c: idx[r] for c, r in class_rows.items()},
        by_subject={s: idx[r] for s, r in subject_rows.items()},
        class_rows=class_rows,
        subject_rows=subject_rows,
        row_classes=row_classes,
        row_subjects=row_subjects,
    )


# -- text serialization -----------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """Write the line-oriented text format.

    Line 1 is a version tag, line 2 ``d=.. n_c=.. n_s=..``, line 3 the
    subject->class map, then one ``subject,class,f1,...,fd`` row per sample.
    """
    lines = [
        f"# hetloss-dataset v{FORMAT_VERSION}",
        f"d={ds.dim} n_c={ds.n_classes} n_s={ds.n_subjects}",
        "subject_class=" + ",".join(str(int(c)) for c in ds.subject_class),
    ]
    for s, c, row in zip(ds.subjects, ds.classes, ds.features):
        lines.append(f"{s},{c}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# hetloss-dataset v"):
            raise ValueError(f"{path}: missing dataset version header")
        version = int(first.rsplit("v", 1)[1])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        header = dict(tok.split("=", 1) for tok in fh.readline().split())
        d, n_c, n_s = int(header["d"]), int(header["n_c"]), int(header["n_s"])
        key, _, values = fh.readline().strip().partition("=")
        if key != "subject_class":
            raise ValueError(f"{path}: expected subject_class line")
        subject_class = [int(v) for v in values.split(",")] if values else []
        if len(subject_class) != n_s:
            raise ValueError(f"{path}: subject_class has {len(subject_class)} entries, header says {n_s}")
        rows = [line for line in fh.read().splitlines() if line.strip()]
    subjects = np.empty(len(rows), dtype=np.int64)
    classes = np.empty(len(rows), dtype=np.int64)
    feats = np.empty((len(rows), d), dtype=np.float64)
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise ValueError(f"{path}: sample line {i} has {len(parts) - 2} features, expected {d}")
        subjects[i] = int(parts[0])
        classes[i] = int(parts[1])
        feats[i] = [float(v) for v in parts[2:]]
    return Dataset(feats, subjects, classes, subject_class, n_c)
