"""Heterogeneity loss, subject-stratified folds and a thresholded ensemble for subject-grouped data."""

from .core import Dataset, MiniBatch, Sample, load_dataset, partition_batch, save_dataset, validate_dataset
from .ensemble import EnsembleConfig, batch_decide, decide, harmonic_mean_probs
from .loss import DEFAULT_WEIGHTS, CenterStore, LossBreakdown, LossWeights, heterogeneity_loss
from .metrics import high_confidence_subset_eval, weighted_f1
from .model import TrainConfig, predict_proba, train_two_stage
from .sampler import FoldPlan, fold_train_val, stratified_subject_folds
from .synthdata import GenConfig, benchmark_preset, generate

__version__ = "0.1.0"
