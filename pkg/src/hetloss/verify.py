"""Built-in property suite: gradient checks, decomposition identity and oracles.

Each check returns a :class:`CheckResult`. ``fault`` names a gradient group
to corrupt before comparison, which lets callers confirm that a broken
gradient is reported by name.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .core import Dataset, partition_batch
from .ensemble import HARMONIC, MAX_VOTE, EnsembleConfig, decide
from .loss import DEFAULT_WEIGHTS, CenterStore, finite_difference_check, subject_class_center_loss
from .metrics import weighted_f1
from .model import backward, forward, init_params, trainable


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass
class Instance:
    ds: Dataset
    batch: object
    params: object
    centers: CenterStore


def random_instance(seed: int, d: int = 6, m: int = 12, n_s: int = 5, hidden=(7,),
                    activation: str = "tanh") -> Instance:
    """Small two-class problem with centers drawn at unit scale so every term is active."""
    rng = np.random.default_rng(seed)
    subject_class = np.arange(n_s) % 2
    rng.shuffle(subject_class)
    subjects = np.repeat(np.arange(n_s), 4)
    ds = Dataset(rng.standard_normal((len(subjects), d)), subjects, subject_class[subjects], subject_class, 2)
    batch = partition_batch(ds, rng.choice(len(ds), size=min(m, len(ds)), replace=False))
    params = init_params(d, hidden, 4, 2, seed=seed, activation=activation)
    centers = CenterStore(rng.standard_normal((2, 4)), rng.standard_normal((n_s, 4)))
    return Instance(ds, batch, params, centers)


def gradient_report(inst: Instance, weights=DEFAULT_WEIGHTS, fault: str | None = None, tolerance: float = 1e-5):
    X = inst.ds.features[inst.batch.indices]
    grads, _ = backward(inst.params, forward(inst.params, X), inst.batch, inst.centers, weights,
                        inst.ds.subject_class)
    if fault is not None:
        if fault not in grads:
            raise KeyError(f"unknown gradient group {fault!r}")
        grads[fault] = grads[fault].copy()
        grads[fault].reshape(-1)[0] += 1e-3

    def loss():
        fwd = forward(inst.params, X)
        _, br = backward(inst.params, fwd, inst.batch, inst.centers, weights, inst.ds.subject_class)
        return br.total

    return finite_difference_check(loss, trainable(inst.params, inst.centers), grads, tolerance=tolerance)


def check_gradients(n: int = 20, fault: str | None = None) -> CheckResult:
    t0 = time.perf_counter()
    worst, failed = 0.0, set()
    for seed in range(n):
        rng = np.random.default_rng(10_000 + seed)
        inst = random_instance(seed, d=int(rng.integers(2, 9)), m=int(rng.integers(4, 17)),
                               n_s=int(rng.integers(2, 7)))
        rep = gradient_report(inst, fault=fault)
        worst = max(worst, max(rep.max_rel_error.values()))
        failed.update(rep.failed_groups)
    detail = f"{n} instances, max rel err {worst:.2e}"
    if failed:
        detail += ", failing groups: " + ", ".join(sorted(failed))
    return CheckResult("gradients", not failed, detail, time.perf_counter() - t0)


def check_decomposition(n: int = 100) -> CheckResult:
    t0 = time.perf_counter()
    w = DEFAULT_WEIGHTS
    worst = 0.0
    for seed in range(n):
        inst = random_instance(seed, n_s=6)
        X = inst.ds.features[inst.batch.indices]
        _, br = backward(inst.params, forward(inst.params, X), inst.batch, inst.centers, w,
                         inst.ds.subject_class)
        expect = br.ce + w.lambda1 * br.class_center + w.lambda2 * br.subject_center + w.lambda3 * br.subject_class
        worst = max(worst, abs(br.total - expect) / max(abs(expect), 1e-300))
    return CheckResult("decomposition", worst <= 1e-12, f"{n} batches, max rel err {worst:.1e}",
                       time.perf_counter() - t0)


def _pairs_loop(subjects, C, subject_class) -> float:
    total = 0.0
    for i in subjects:
        for j in subjects:
            if i != j:
                d2 = float(np.sum((C[i] - C[j]) ** 2))
                total += d2 if subject_class[i] == subject_class[j] else 1.0 / (1.0 + d2)
    return total


def check_pair_oracle() -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    subject_class = np.array([0, 1, 0, 1, 1, 0])
    C = rng.standard_normal((6, 3))
    store = CenterStore(np.zeros((2, 3)), C)
    worst, n = 0.0, 0
    for size in range(1, 6):
        for subset in itertools.combinations(range(6), size):
            got, _ = subject_class_center_loss(list(subset), store, subject_class)
            want = _pairs_loop(subset, C, subject_class)
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
            n += 1
    same = CenterStore(np.zeros((2, 3)), np.zeros((6, 3)))
    got, _ = subject_class_center_loss([0, 1], same, subject_class)
    ok = worst <= 1e-12 and got == 2.0
    return CheckResult("pair oracle", ok, f"{n} subject sets, max rel err {worst:.1e}, coincident pair {got}",
                       time.perf_counter() - t0)


def _literal_rule(P, theta, eps=1e-6):
    best_conf, best_model = -1.0, 0
    for k, p in enumerate(P):
        if max(p) > best_conf:
            best_conf, best_model = max(p), k
    if best_conf > theta:
        p = list(P[best_model])
        return p.index(max(p)), MAX_VOTE
    hm = [len(P) / sum(1.0 / max(p[c], eps) for p in P) for c in range(len(P[0]))]
    return hm.index(max(hm)), HARMONIC


def check_ensemble(n: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(n):
        theta = (0.95, 0.98)[i % 2]
        if i % 5 == 0:
            v = rng.choice([0.4, 0.5, 0.97, 0.99], size=7)
            P = np.stack([v, 1 - v], axis=1)
        else:
            P = rng.dirichlet(np.full(2, rng.choice([0.2, 1.0, 5.0])), size=7)
        d = decide(P, EnsembleConfig(theta=theta))
        mismatches += (d.label, d.rule) != _literal_rule(P.tolist(), theta)
    return CheckResult("ensemble rule", mismatches == 0, f"{n} sets, {mismatches} mismatches",
                       time.perf_counter() - t0)


def _f1_loop(pred, truth, n_c):
    total = 0.0
    for c in range(n_c):
        tp = sum(p == c and t == c for p, t in zip(pred, truth))
        fp = sum(p == c and t != c for p, t in zip(pred, truth))
        fn = sum(p != c and t == c for p, t in zip(pred, truth))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
        total += f1 * (tp + fn)
    return total / len(truth)


def check_f1(n: int = 500) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(n):
        n_c = int(rng.integers(2, 4))
        size = int(rng.integers(1, 201))
        pred, truth = rng.integers(0, n_c, size).tolist(), rng.integers(0, n_c, size).tolist()
        got = weighted_f1(pred, truth, n_c).weighted_f1
        worst = max(worst, abs(got - _f1_loop(pred, truth, n_c)))
    hand = weighted_f1([0] * 8 + [1] * 2 + [0] * 3 + [1] * 7, [0] * 10 + [1] * 10).weighted_f1
    ok = worst <= 1e-12 and abs(hand - 0.74937) < 1e-5
    return CheckResult("weighted f1", ok, f"{n} pairs, max abs err {worst:.1e}, [[8,2],[3,7]] -> {hand:.5f}",
                       time.perf_counter() - t0)


def run_all(fault: str | None = None) -> list[CheckResult]:
    return [check_gradients(fault=fault), check_decomposition(), check_pair_oracle(),
            check_ensemble(), check_f1()]
