"""Heterogeneity loss: cross-entropy plus class-, subject- and subject-class-center terms.

Every term returns its value together with analytic gradients. Feature
matrices are ``(m, d)`` with rows aligned to ``batch.indices``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import MiniBatch


@dataclass
class CenterStore:
    class_centers: np.ndarray
    subject_centers: np.ndarray

    @classmethod
    def init(cls, n_classes: int, n_subjects: int, dim: int, seed: int, scale: float = 0.01):
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_classes, dim)) * scale,
                   rng.standard_normal((n_subjects, dim)) * scale)

    @property
    def dim(self) -> int:
        return self.class_centers.shape[1]

    def copy(self) -> "CenterStore":
        return CenterStore(self.class_centers.copy(), self.subject_centers.copy())


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.05
    lambda3: float = 0.005

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


DEFAULT_WEIGHTS = LossWeights(0.05, 0.05, 0.005)
CE_ONLY = LossWeights(0.0, 0.0, 0.0)


@dataclass
class LossBreakdown:
    ce: float
    class_center: float
    subject_center: float
    subject_class: float
    total: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    def row(self) -> tuple[float, float, float, float, float]:
        return (self.ce, self.class_center, self.subject_center, self.subject_class, self.total)


LOG_COLUMNS = ("step", "ce", "class", "subject", "subject_class", "total")


def write_loss_log(rows, path) -> None:
    """``rows`` are ``(step, ce, class, subject, subject_class, total)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])


def cross_entropy(features, labels, W, b):
    """Mean softmax cross-entropy of ``features @ W.T + b``.

    Returns ``(loss, dfeatures, dW, db)``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    m = X.shape[0]
    if m < 1:
        raise ValueError("cross_entropy needs at least one sample")
    n_c = W.shape[0]
    if y.max() >= n_c or y.min() < 0:
        raise ValueError(f"label {int(y.max())} outside 0..{n_c - 1}")
    logits = X @ W.T + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(lse - shifted[rows, y]))
    probs = np.exp(shifted - lse[:, None])
    dlogits = probs
    dlogits[rows, y] -= 1.0
    dlogits /= m
    return loss, dlogits @ W, dlogits.T @ X, dlogits.sum(axis=0)


def _center_term(group_of_row: np.ndarray, X: np.ndarray, centers: np.ndarray):
    """Sum over groups of the mean squared distance to the group's center."""
    if X.shape[1] != centers.shape[1]:
        raise ValueError(f"feature dim {X.shape[1]} does not match center dim {centers.shape[1]}")
    g = np.asarray(group_of_row, dtype=np.int64)
    if len(g) and (g.max() >= centers.shape[0] or g.min() < 0):
        raise ValueError(f"group {int(g.max())} has no center")
    sizes = np.bincount(g, minlength=centers.shape[0]).astype(np.float64)
    w = 1.0 / sizes[g]
    diff = X - centers[g]
    loss = float(np.sum(np.sum(diff * diff, axis=1) * w))
    dX = 2.0 * diff * w[:, None]
    dC = np.zeros_like(centers)
    np.add.at(dC, g, -dX)
    return loss, dX, dC


def _rows_to_groups(groups: Mapping[int, np.ndarray], m: int) -> np.ndarray:
    out = np.empty(m, dtype=np.int64)
    for key, rows in groups.items():
        out[rows] = key
    return out


def class_center_loss(batch: MiniBatch, features, centers: CenterStore):
    """Returns ``(loss, dfeatures, dclass_centers)``; absent classes get zero gradient."""
    rows = batch.row_classes if batch.row_classes is not None else _rows_to_groups(batch.class_rows, batch.size)
    return _center_term(rows, np.asarray(features, dtype=np.float64), centers.class_centers)


def subject_center_loss(batch: MiniBatch, features, centers: CenterStore):
    """Returns ``(loss, dfeatures, dsubject_centers)``."""
    rows = batch.row_subjects if batch.row_subjects is not None else _rows_to_groups(batch.subject_rows, batch.size)
    return _center_term(rows, np.asarray(features, dtype=np.float64), centers.subject_centers)


def subject_class_center_loss(present_subjects, centers: CenterStore, subject_class):
    """Pairwise term over subject centers of the subjects present in the batch.

    Summed over ordered pairs (i, j), i != j: same-class pairs add the squared
    distance, different-class pairs add ``1 / (1 + squared distance)``.
    Returns ``(loss, dsubject_centers)``.
    """
    subj = np.asarray(list(present_subjects), dtype=np.int64)
    C = centers.subject_centers
    grad = np.zeros_like(C)
    if len(subj) < 2:
        return 0.0, grad
    if subj.max() >= C.shape[0] or subj.min() < 0:
        raise ValueError(f"subject {int(subj.max())} has no center")
    P = C[subj]
    labels = np.asarray(subject_class)[subj]
    diff = P[:, None, :] - P[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(subj), dtype=bool)
    attract = same & off_diag
    repel = ~same
    inv = 1.0 / (1.0 + sq)
    loss = float(np.sum(sq[attract]) + np.sum(inv[repel]))
    # each unordered pair appears twice, hence the factor 4 = 2 * 2
    coef = np.where(attract, 4.0, 0.0) + np.where(repel, -4.0 * inv * inv, 0.0)
    g = np.einsum("ij,ijk->ik", coef, diff)
    np.add.at(grad, subj, g)
    return loss, grad


def heterogeneity_loss(batch: MiniBatch, features, head, centers: CenterStore,
                       weights: LossWeights, labels=None, subject_class=None) -> LossBreakdown:
    """Weighted sum of the four terms with gradients for every parameter group.

    ``head`` is ``(W, b)``. Class labels per row default to the batch's class
    partition; ``subject_class`` is required whenever ``lambda3`` is nonzero.
    Gradient keys: ``features``, ``W``, ``b``, ``class_centers``, ``subject_centers``.
    """
    X = np.asarray(features, dtype=np.float64)
    W, b = head
    if labels is None:
        labels = batch.row_classes if batch.row_classes is not None else _rows_to_groups(batch.class_rows, batch.size)
    ce, dX, dW, db = cross_entropy(X, labels, W, b)
    l1, l2, l3 = weights.lambda1, weights.lambda2, weights.lambda3

    cc, dX_c, dCc = class_center_loss(batch, X, centers)
    sc, dX_s, dCs = subject_center_loss(batch, X, centers)
    if subject_class is None:
        if l3 != 0:
            raise ValueError("subject_class map required for the subject-class term")
        scc, dCs_pair = 0.0, np.zeros_like(centers.subject_centers)
    else:
        scc, dCs_pair = subject_class_center_loss(batch.present_subjects, centers, subject_class)

    total = ce + l1 * cc + l2 * sc + l3 * scc
    grads = {
        "features": dX + l1 * dX_c + l2 * dX_s,
        "W": dW,
        "b": db,
        "class_centers": l1 * dCc,
        "subject_centers": l2 * dCs + l3 * dCs_pair,
    }
    return LossBreakdown(ce, cc, sc, scc, total, grads)


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: dict[str, bool]
    tolerance: float
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.passed.values()) and not self.notes

    @property
    def failed_groups(self) -> list[str]:
        return [k for k, v in self.passed.items() if not v]

    def __str__(self) -> str:
        lines = [f"{name:>16s}  max rel err {err:.3e}  {'ok' if self.passed[name] else 'FAIL'}"
                 for name, err in self.max_rel_error.items()]
        return "\n".join(lines + self.notes)


def finite_difference_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                            analytic: Mapping[str, np.ndarray], epsilon: float = 1e-5,
                            tolerance: float = 1e-5, max_coords: int = 1000,
                            seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` reads the arrays in ``params`` (perturbed in place and restored).
    Groups above ``max_coords`` entries are checked on a seeded coordinate subsample.
    The error per group is ``max|g_a - g_fd| / max(1, max|g_fd|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    passed: dict[str, bool] = {}
    notes: list[str] = []
    for name, p in params.items():
        flat = p.reshape(-1)
        g_a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g_fd = np.empty(len(coords))
        finite = True
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn()
            flat[i] = orig - epsilon
            fm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                finite = False
                notes.append(f"{name}[{i}]: non-finite loss at perturbed point")
                g_fd[j] = np.nan
                continue
            g_fd[j] = (fp - fm) / (2.0 * epsilon)
        if not finite:
            errors[name] = float("inf")
            passed[name] = False
            continue
        denom = max(1.0, float(np.max(np.abs(g_fd))) if len(g_fd) else 1.0)
        err = float(np.max(np.abs(g_a[coords] - g_fd))) / denom if len(g_fd) else 0.0
        errors[name] = err
        passed[name] = err < tolerance
    return GradCheckReport(errors, passed, tolerance, notes)
