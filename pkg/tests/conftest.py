import numpy as np
import pytest

from hetloss.core import Dataset
from hetloss.synthdata import GenConfig, generate


def make_dataset(subject_class, counts, dim=3, seed=0):
    """Dataset with ``counts[s]`` random rows for each subject ``s``."""
    rng = np.random.default_rng(seed)
    subjects = np.repeat(np.arange(len(counts)), counts)
    classes = np.asarray(subject_class)[subjects]
    feats = rng.standard_normal((len(subjects), dim))
    return Dataset(feats, subjects, classes, subject_class, int(max(subject_class)) + 1)


@pytest.fixture
def small_ds():
    ds, _ = generate(GenConfig(d=6, subjects_per_class=4, min_images=5, max_images=20,
                               class_imbalance_ratio=1.5, seed=11))
    return ds


@pytest.fixture
def tiny_ds():
    ds, _ = generate(GenConfig(d=5, subjects_per_class=3, min_images=3, max_images=6,
                               class_imbalance_ratio=1.0, seed=1))
    return ds
