"""Per-subject consolidation of chunk predictions and the outlier rule.

A subject's K chunk predictions are averaged into one predicted age and one
uncertainty (arithmetic means of the per-chunk means and standard
deviations). The subject is flagged when ``|predicted - CA| > R * sigma``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .hetreg import ChunkPrediction

DEFAULT_R = 1.96  # two-sided 95% normal quantile


@dataclass(frozen=True)
class OutlierConfig:
    R: float = DEFAULT_R

    def __post_init__(self) -> None:
        if not (isinstance(self.R, (int, float)) and self.R > 0 and math.isfinite(self.R)):
            raise ConfigError("R", "must be a positive finite number")

    def to_dict(self) -> dict:
        return {"R": self.R}


@dataclass(frozen=True)
class SubjectAssessment:
    subject_id: str
    ca: float
    mean_age: float
    sigma: float
    deviation: float
    threshold: float
    flagged: bool


def consolidate_subject(chunk_predictions: Sequence[ChunkPrediction], K: int | None = None) -> tuple[float, float]:
    """Average chunk means and chunk standard deviations."""
    if len(chunk_predictions) == 0:
        raise ValueError("no chunk predictions to consolidate")
    if K is not None and K != len(chunk_predictions):
        raise ValueError(f"expected {K} chunk predictions, got {len(chunk_predictions)}")
    means = np.array([p.mean_age for p in chunk_predictions])
    sigmas = np.exp(0.5 * np.array([p.log_variance for p in chunk_predictions]))
    return float(means.mean()), float(sigmas.mean())


def consolidate_arrays(mean_age: np.ndarray, log_variance: np.ndarray) -> tuple[float, float]:
    """Same as :func:`consolidate_subject` on raw per-chunk arrays."""
    mean_age = np.asarray(mean_age, dtype=np.float64)
    if mean_age.size == 0:
        raise ValueError("no chunk predictions to consolidate")
    return float(mean_age.mean()), float(np.exp(0.5 * np.asarray(log_variance, dtype=np.float64)).mean())


def assess(subject_id: str, ca: float, mean_age: float, sigma: float, config: OutlierConfig = OutlierConfig()) -> SubjectAssessment:
    if not sigma > 0:
        raise ValueError(f"subject {subject_id}: sigma must be > 0, got {sigma}")
    deviation = abs(mean_age - ca)
    threshold = config.R * sigma
    return SubjectAssessment(subject_id, ca, mean_age, sigma, deviation, threshold, deviation > threshold)


def assess_subject(subject, mean_age: float, sigma: float, config: OutlierConfig = OutlierConfig()) -> SubjectAssessment:
    return assess(subject.id, subject.chronological_age, mean_age, sigma, config)


ASSESSMENT_HEADER = ["iteration", "subject_id", "ca", "pred_mean", "sigma", "deviation", "threshold", "flagged"]


def write_assessments_csv(rows: Iterable[tuple[int, SubjectAssessment]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSESSMENT_HEADER)
        for it, a in rows:
            w.writerow([it, a.subject_id, repr(a.ca), repr(a.mean_age), repr(a.sigma),
                        repr(a.deviation), repr(a.threshold), int(a.flagged)])


def read_assessments_csv(path: str | Path) -> list[tuple[int, SubjectAssessment]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ASSESSMENT_HEADER:
            raise ValueError(f"{path}: unexpected assessment header")
        for r in reader:
            out.append((int(r["iteration"]), SubjectAssessment(
                r["subject_id"], float(r["ca"]), float(r["pred_mean"]), float(r["sigma"]),
                float(r["deviation"]), float(r["threshold"]), r["flagged"] == "1",
            )))
    return out
