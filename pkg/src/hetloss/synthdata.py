"""Seeded subject-heterogeneous datasets.

Each sample is ``class_mean[c] + subject_offset[s] + noise``. Subject image
counts follow a truncated power law (long tail), and the per-class totals are
rescaled so that the last class holds ``class_imbalance_ratio`` times as many
images as the first.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset


class GenConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class GenConfig:
    d: int = 16
    n_classes: int = 2
    subjects_per_class: tuple[int, ...] | int = 14
    class_separation: float = 2.0
    subject_bias_scale: float = 1.5
    noise_scale: float = 1.0
    power_exponent: float = 1.5
    min_images: int = 20
    max_images: int = 400
    class_imbalance_ratio: float = 2.1
    seed: int = 0

    def per_class_subjects(self) -> list[int]:
        if isinstance(self.subjects_per_class, int):
            return [self.subjects_per_class] * self.n_classes
        return [int(v) for v in self.subjects_per_class]

    def validate(self) -> None:
        if self.d < 1:
            raise GenConfigError("d", "must be >= 1")
        if self.n_classes < 2:
            raise GenConfigError("n_classes", "must be >= 2")
        spc = self.per_class_subjects()
        if len(spc) != self.n_classes:
            raise GenConfigError("subjects_per_class", f"expected {self.n_classes} entries, got {len(spc)}")
        if min(spc) < 1:
            raise GenConfigError("subjects_per_class", "every class needs at least one subject")
        for name in ("class_separation", "subject_bias_scale", "noise_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise GenConfigError(name, f"must be a finite value >= 0, got {value}")
        if not self.power_exponent > 0:
            raise GenConfigError("power_exponent", "must be > 0")
        if self.min_images < 1:
            raise GenConfigError("min_images", "must be >= 1")
        if self.min_images > self.max_images:
            raise GenConfigError("max_images", f"min_images={self.min_images} exceeds max_images={self.max_images}")
        if not self.class_imbalance_ratio > 0:
            raise GenConfigError("class_imbalance_ratio", "must be > 0")


def benchmark_preset(seed: int = 0, **overrides) -> GenConfig:
    """Benchmark preset: bias comparable to class signal, long-tailed subject sizes, ~2:1 imbalance."""
    return GenConfig(seed=seed, **overrides)


@dataclass
class GroundTruth:
    class_means: np.ndarray
    subject_offsets: np.ndarray
    subject_counts: np.ndarray
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": "hetloss-groundtruth",
            "version": 1,
            "config": self.config,
            "class_means": self.class_means.tolist(),
            "subject_offsets": self.subject_offsets.tolist(),
            "subject_counts": self.subject_counts.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


def sample_power_law(rng: np.random.Generator, exponent: float, lo: int, hi: int, size: int) -> np.ndarray:
    """Inverse-CDF draws from density proportional to n**-exponent on [lo, hi + 1), floored to ints."""
    u = rng.random(size)
    a, b = float(lo), float(hi) + 1.0
    if abs(exponent - 1.0) < 1e-12:
        x = a * (b / a) ** u
    else:
        e = 1.0 - exponent
        x = (a ** e + u * (b ** e - a ** e)) ** (1.0 / e)
    return np.clip(np.floor(x).astype(np.int64), lo, hi)


def _fit_total(raw: np.ndarray, target: float, lo: int, hi: int) -> np.ndarray:
    """Scale counts by a common factor (then round and clip) so their sum lands near ``target``."""

    def counts(scale):
        return np.clip(np.rint(raw * scale), lo, hi).astype(np.int64)

    s_lo, s_hi = 0.0, 1.0
    while counts(s_hi).sum() < target and s_hi < 1e6:
        s_hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (s_lo + s_hi)
        if counts(mid).sum() < target:
            s_lo = mid
        else:
            s_hi = mid
    below, above = counts(s_lo), counts(s_hi)
    return below if abs(below.sum() - target) <= abs(above.sum() - target) else above


def generate(config: GenConfig) -> tuple[Dataset, GroundTruth]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, n_c = config.d, config.n_classes
    spc = config.per_class_subjects()

    # class means: regular simplex with every pair class_separation apart, randomly rotated
    if d < n_c - 1:
        raise GenConfigError("d", f"must be >= n_classes - 1 = {n_c - 1}")
    simplex = np.eye(n_c) - 1.0 / n_c
    emb = np.linalg.svd(simplex)[0][:, : n_c - 1]
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0][:, : n_c - 1]
    class_means = (simplex @ emb) @ basis.T * (config.class_separation / np.sqrt(2.0))

    subject_class = np.concatenate([np.full(n, c, dtype=np.int64) for c, n in enumerate(spc)])
    n_s = len(subject_class)
    offsets = rng.standard_normal((n_s, d)) * config.subject_bias_scale

    raw = sample_power_law(rng, config.power_exponent, config.min_images, config.max_images, n_s)
    ref_total = raw[subject_class == 0].sum()
    counts = raw.copy()
    for c in range(n_c):
        members = subject_class == c
        weight = config.class_imbalance_ratio ** (c / (n_c - 1))
        target = weight * ref_total
        lo_total = members.sum() * config.min_images
        hi_total = members.sum() * config.max_images
        if not lo_total * 0.9 <= target <= hi_total * 1.1:
            raise GenConfigError(
                "class_imbalance_ratio",
                f"class {c} needs ~{target:.0f} images but its {members.sum()} subjects "
                f"allow only [{lo_total}, {hi_total}]",
            )
        if c > 0:
            counts[members] = _fit_total(raw[members], target, config.min_images, config.max_images)
    totals = np.bincount(subject_class, weights=counts, minlength=n_c)
    for c in range(1, n_c):
        want = config.class_imbalance_ratio ** (c / (n_c - 1))
        got = totals[c] / totals[0]
        if abs(got - want) > 0.1 * want:
            raise GenConfigError(
                "class_imbalance_ratio",
                f"achieved class {c}/0 ratio {got:.3f}, outside 10% of {want:.3f} under count bounds",
            )

    subjects = np.repeat(np.arange(n_s), counts)
    classes = subject_class[subjects]
    noise = rng.standard_normal((len(subjects), d)) * config.noise_scale
    features = class_means[classes] + offsets[subjects] + noise
    ds = Dataset(features, subjects, classes, subject_class, n_c)
    cfg = asdict(config)
    truth = GroundTruth(class_means, offsets, counts, cfg)
    return ds, truth
