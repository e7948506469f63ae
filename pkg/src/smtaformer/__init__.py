"""SMTAFormer: static + multivariate temporal attentive fusion for readmission risk.

Numpy-only implementation with its own reverse-mode autodiff, a raw-stay
preprocessing pipeline, a planted-signal synthetic cohort, training and
cross-validation, and attention export.
"""
from .autodiff import Tensor, backward, grad_check, gradient_errors, no_grad
from .cohort import CohortRules, PatientRecord, RawStay, fit_normalizer, apply_normalizer, kfold, split_dataset
from .errors import (
    ConfigurationError,
    DataError,
    DataIntegrityError,
    DimensionError,
    EmptySequenceError,
    NumericError,
    PipelineOrderError,
    RankError,
    SchemaError,
    SmtaformerError,
)
from .experiment import cross_validate, export_attention, toy_grad_check
from .metrics import Metrics, compute_metrics, rank_auc, trapezoid_auc
from .model import LogisticConfig, ModelConfig, SMTAFormer, build_model, load_checkpoint, save_checkpoint
from .pipeline import Dataset, load_dataset, preprocess
from .synth import SynthConfig, generate, oracle_auc
from .training import TrainConfig, TrainHistory, adam_step, bce_loss, train

__version__ = "0.1.0"
