"""Thresholded max-vote / harmonic-mean decision over K models' confidences.

If the single most confident model is more confident than ``theta`` its
argmax is the answer. Otherwise the per-class harmonic mean of all K
probability vectors (renormalized) decides.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_VOTE = "max-vote"
HARMONIC = "harmonic"


@dataclass(frozen=True)
class EnsembleConfig:
    theta: float = 0.95
    epsilon_clamp: float = 1e-6
    n_models: int | None = None

    def __post_init__(self):
        if not 0.9 <= self.theta < 1.0:
            raise ValueError(f"theta must lie in [0.9, 1.0), got {self.theta}")
        if not self.epsilon_clamp > 0:
            raise ValueError("epsilon_clamp must be positive")

    def check(self, n_classes: int) -> None:
        if self.epsilon_clamp >= 1.0 / n_classes:
            raise ValueError(f"epsilon_clamp {self.epsilon_clamp} must be below 1/n_c = {1.0 / n_classes}")


@dataclass(frozen=True)
class Decision:
    label: int
    confidence: float
    rule: str


def _as_confidences(confidences) -> np.ndarray:
    P = np.asarray(confidences, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError("confidences must be a (K, n_c) array with K >= 1")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("each model's confidence vector must be non-negative and sum to 1")
    return P


def harmonic_mean_probs(confidences, epsilon_clamp: float = 1e-6) -> np.ndarray:
    """Per-class harmonic mean ``K / sum_k 1/max(p_k[c], eps)``, renormalized to sum 1."""
    P = np.asarray(confidences, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    K = P.shape[0]
    hm = K / np.sum(1.0 / np.maximum(P, epsilon_clamp), axis=0)
    return hm / hm.sum()


def decide(confidences, config: EnsembleConfig) -> Decision:
    P = _as_confidences(confidences)
    config.check(P.shape[1])
    if config.n_models is not None and P.shape[0] != config.n_models:
        raise ValueError(f"expected {config.n_models} models, got {P.shape[0]}")
    per_model = P.max(axis=1)
    k_star = int(np.argmax(per_model))  # first maximum, i.e. lowest model index
    if per_model[k_star] > config.theta:
        return Decision(int(np.argmax(P[k_star])), float(per_model[k_star]), MAX_VOTE)
    hm = harmonic_mean_probs(P, config.epsilon_clamp)
    label = int(np.argmax(hm))
    return Decision(label, float(hm[label]), HARMONIC)


@dataclass
class BatchDecisions:
    decisions: list[Decision]
    rule_fractions: dict[str, float]

    @property
    def labels(self) -> np.ndarray:
        return np.array([d.label for d in self.decisions], dtype=np.int64)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([d.confidence for d in self.decisions])


def batch_decide(per_sample: Sequence, config: EnsembleConfig) -> BatchDecisions:
    """Apply :func:`decide` to each sample's ``(K, n_c)`` confidences."""
    if len(per_sample) == 0:
        return BatchDecisions([], {MAX_VOTE: 0.0, HARMONIC: 0.0})
    K = np.asarray(per_sample[0]).shape[0]
    decisions = []
    for i, conf in enumerate(per_sample):
        if np.asarray(conf).shape[0] != K:
            raise ValueError(f"sample {i} has {np.asarray(conf).shape[0]} models, expected {K}")
        decisions.append(decide(conf, config))
    n = len(decisions)
    fractions = {rule: sum(d.rule == rule for d in decisions) / n for rule in (MAX_VOTE, HARMONIC)}
    return BatchDecisions(decisions, fractions)


# -- CSV interfaces ---------------------------------------------------------

def write_confidences_csv(path, sample_ids, probs_per_model: Sequence[np.ndarray]) -> None:
    """One row per (sample, model): ``sample_id,model_id,p_class0,...``."""
    n_c = probs_per_model[0].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "model_id"] + [f"p_class{c}" for c in range(n_c)])
        for row, sid in enumerate(sample_ids):
            for k, probs in enumerate(probs_per_model):
                w.writerow([int(sid), k] + [repr(float(v)) for v in probs[row]])


def read_confidences_csv(path) -> tuple[list[int], list[np.ndarray]]:
    """Returns sample ids (file order of first appearance) and a ``(K, n_c)`` array per sample."""
    rows: dict[int, dict[int, list[float]]] = defaultdict(dict)
    order: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["sample_id", "model_id"]:
            raise ValueError(f"{path}: unexpected header {header[:2]}")
        for rec in reader:
            sid, mid = int(rec[0]), int(rec[1])
            if sid not in rows:
                order.append(sid)
            if mid in rows[sid]:
                raise ValueError(f"{path}: duplicate row for sample {sid} model {mid}")
            rows[sid][mid] = [float(v) for v in rec[2:]]
    out = []
    for sid in order:
        models = rows[sid]
        out.append(np.array([models[k] for k in sorted(models)], dtype=np.float64))
    return order, out


def write_decisions_csv(path, sample_ids, decisions: Sequence[Decision]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "decided_class", "confidence", "rule"])
        for sid, d in zip(sample_ids, decisions):
            w.writerow([int(sid), d.label, repr(d.confidence), d.rule])


def read_decisions_csv(path) -> tuple[list[int], list[Decision]]:
    ids, decisions = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            ids.append(int(rec["sample_id"]))
            decisions.append(Decision(int(rec["decided_class"]), float(rec["confidence"]), rec["rule"]))
    return ids, decisions
