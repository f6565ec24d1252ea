"""Loss-ablation benchmark on synthetic subject-heterogeneous data.

For each root seed a benchmark-preset dataset is generated and split at subject
level: one fold is held out as unseen test subjects, one fold validates, the
rest trains. Every loss configuration is trained on exactly the same split
with the same seeds and budget, and scored by weighted-F1 on the held-out
subjects.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .loss import LossWeights
from .metrics import weighted_f1
from .model import TrainConfig, forward, train_two_stage
from .sampler import stratified_subject_folds
from .synthdata import GenConfig, benchmark_preset, generate

ABLATION = {
    "ce": LossWeights(0.0, 0.0, 0.0),
    "ce+class": LossWeights(0.05, 0.0, 0.0),
    "ce+class+subject": LossWeights(0.05, 0.05, 0.0),
    "hetero": LossWeights(0.05, 0.05, 0.005),
}


@dataclass
class AblationResult:
    seeds: list[int]
    scores: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, name: str) -> float:
        return float(np.mean(self.scores[name]))

    def summary(self) -> str:
        lines = [f"{'config':<18s} mean weighted-F1 over {len(self.seeds)} seeds"]
        for name, vals in self.scores.items():
            lines.append(f"{name:<18s} {100 * np.mean(vals):6.2f}%  (sd {100 * np.std(vals):.2f})")
        lines.append(f"runtime {self.seconds:.1f}s")
        return "\n".join(lines)


def split_for_seed(ds, seed: int, k: int = 7, test_folds=(0,), val_fold: int = 1):
    plan = stratified_subject_folds(ds, k=k, seed=seed)
    fold_of = np.asarray(plan.assignment)[ds.subjects]
    test = np.flatnonzero(np.isin(fold_of, test_folds))
    val = np.flatnonzero(fold_of == val_fold)
    train = np.flatnonzero(~np.isin(fold_of, (*test_folds, val_fold)))
    return train, val, test


def run_ablation(seeds, train_config: TrainConfig | None = None, configs=None,
                 gen: GenConfig | None = None, k: int = 7, test_folds=(0, 1), val_fold: int = 2) -> AblationResult:
    configs = configs or ABLATION
    base = train_config or TrainConfig()
    result = AblationResult(list(seeds), {name: [] for name in configs})
    t0 = time.perf_counter()
    for seed in seeds:
        ds, _ = generate(replace(gen, seed=seed) if gen else benchmark_preset(seed))
        train, val, test = split_for_seed(ds, seed, k, test_folds, val_fold)
        cfg = replace(base, seed=seed)
        for name, w in configs.items():
            res = train_two_stage(cfg, ds, train, val, w)
            pred = np.argmax(forward(res.best.params, ds.features[test]).logits, axis=1)
            result.scores[name].append(weighted_f1(pred, ds.classes[test], ds.n_classes).weighted_f1)
    result.seconds = time.perf_counter() - t0
    return result
