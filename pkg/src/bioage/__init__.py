"""Biological-age estimation with heteroscedastic uncertainty and iterative
outlier segregation."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .cohort import GeneratorConfig, Group, Subject, generate_cohort, split_subjects
from .consolidate import OutlierConfig, SubjectAssessment, assess_subject, consolidate_subject
from .hetreg import ChunkPrediction, ModelParams, TrainConfig, forward, nll_gradients, nll_loss, train
from .iterate import FlagLedger, IterateConfig, IterationRecord, run_iteration, run_strategy

__all__ = [
    "BACKEND",
    "ChunkPrediction",
    "FlagLedger",
    "GeneratorConfig",
    "Group",
    "IterateConfig",
    "IterationRecord",
    "ModelParams",
    "OutlierConfig",
    "Subject",
    "SubjectAssessment",
    "TrainConfig",
    "assess_subject",
    "consolidate_subject",
    "forward",
    "generate_cohort",
    "nll_gradients",
    "nll_loss",
    "run_iteration",
    "run_strategy",
    "split_subjects",
    "train",
]
