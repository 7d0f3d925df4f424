"""Desk-scale knowledge distillation toolkit.

A small numpy reverse-mode autodiff engine drives a dual-branch teacher CNN
and an inverted-residual student CNN.  Around them sit the distillation loss,
Adam training, a data pipeline with oversampling and stratified folds, the
six binary metrics with per-fold report tables, checkpoints and the ``kd``
command line.
"""

from .autodiff import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config
from .data import AugmentConfig, Dataset, FoldPlan, load_dataset, make_stratified_folds, oversample_balance, split_holdout
from .estimators import CNNClassifier, DistilledCNNClassifier, ImageResizer, PixelNormalizer
from .experiment import run_stage, seed_study, write_report
from .distill import DistillConfig, kd_loss, kl_divergence, softmax_temperature, train_distill
from .gradcheck import GradCheckReport, grad_check, gradient_suite
from .metrics import ConfusionCounts, FoldReport, MetricRow, compute_metrics, fold_average, improvement_row, param_reduction
from .models import ArchScale, ModelGraph, build_mini_student, build_mini_teacher, count_params, forward, predict
from .training import AdamState, TrainConfig, adam_step, evaluate_model, train_supervised

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "load_checkpoint",
    "save_checkpoint",
    "ExperimentConfig",
    "parse_config",
    "AugmentConfig",
    "Dataset",
    "FoldPlan",
    "load_dataset",
    "make_stratified_folds",
    "oversample_balance",
    "split_holdout",
    "CNNClassifier",
    "DistilledCNNClassifier",
    "ImageResizer",
    "PixelNormalizer",
    "run_stage",
    "seed_study",
    "write_report",
    "DistillConfig",
    "kd_loss",
    "kl_divergence",
    "softmax_temperature",
    "train_distill",
    "GradCheckReport",
    "grad_check",
    "gradient_suite",
    "ConfusionCounts",
    "FoldReport",
    "MetricRow",
    "compute_metrics",
    "fold_average",
    "improvement_row",
    "param_reduction",
    "ArchScale",
    "ModelGraph",
    "build_mini_student",
    "build_mini_teacher",
    "count_params",
    "forward",
    "predict",
    "AdamState",
    "TrainConfig",
    "adam_step",
    "evaluate_model",
    "train_supervised",
]
