"""Iterative outlier segregation.

Each iteration shuffles the whole pool, trains a fresh regressor on one side,
consolidates and assesses the other side, and records who got flagged. The
pool never shrinks while iterating. The run stops once ``stop_window``
consecutive iterations produce no first-time flags (or at
``max_iterations``); subjects flagged at least ``removal_min_flags`` times are
then dropped and a final model is trained on the remainder.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import hetreg
from .cohort import Subject, build_dataclass, split_subjects
from .consolidate import OutlierConfig, SubjectAssessment, assess, consolidate_arrays
from .errors import ConfigError, StrategyError, TrainingError

log = logging.getLogger(__name__)

# seed purposes
SPLIT, TRAIN, FINAL, BASELINE = 0, 1, 2, 3


def derive_seed(master_seed: int, index: int, purpose: int) -> int:
    """64-bit seed for one (iteration, purpose) pair."""
    ss = np.random.SeedSequence([master_seed, index, purpose])
    return int(ss.generate_state(1, np.uint64)[0])


class Regressor(Protocol):
    def fit(self, subjects: Sequence[Subject], seed: int) -> Any: ...

    def predict(self, model: Any, subjects: Sequence[Subject]) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per subject: (chunk mean ages, chunk log-variances)."""
        ...


def subjects_to_batch(subjects: Sequence[Subject]) -> hetreg.Batch:
    X = np.concatenate([s.chunks for s in subjects])
    sex = np.concatenate([np.full(s.n_chunks, float(s.sex)) for s in subjects])
    ca = np.concatenate([np.full(s.n_chunks, s.chronological_age) for s in subjects])
    return hetreg.Batch(X, sex, ca)


@dataclass
class HetRegressor:
    """The heteroscedastic network behind the :class:`Regressor` interface."""

    config: hetreg.TrainConfig = field(default_factory=hetreg.TrainConfig)

    def fit(self, subjects: Sequence[Subject], seed: int) -> hetreg.ModelParams:
        return hetreg.train(subjects_to_batch(subjects), dataclasses.replace(self.config, seed=seed))

    def predict(self, model: hetreg.ModelParams, subjects: Sequence[Subject]):
        b = subjects_to_batch(subjects)
        mean, s = hetreg.forward_batch(model, b.X, b.sex)
        out, off = [], 0
        for subj in subjects:
            out.append((mean[off : off + subj.n_chunks], s[off : off + subj.n_chunks]))
            off += subj.n_chunks
        return out


@dataclass
class IterateConfig:
    train_fraction: float = 0.5
    outlier: OutlierConfig = field(default_factory=OutlierConfig)
    trainer: hetreg.TrainConfig = field(default_factory=hetreg.TrainConfig)
    stop_window: int = 3
    max_iterations: int = 50
    removal_min_flags: int = 2
    master_seed: int = 0
    # "new": stop on first-time flags ceasing; "any": on any flags ceasing
    stop_on: str = "new"

    def __post_init__(self) -> None:
        if isinstance(self.outlier, dict):
            self.outlier = build_dataclass(OutlierConfig, self.outlier, "outlier")
        if isinstance(self.trainer, dict):
            self.trainer = build_dataclass(hetreg.TrainConfig, self.trainer, "trainer")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction", "must lie in (0, 1)")
        if self.stop_window < 1:
            raise ConfigError("stop_window", "must be >= 1")
        if self.max_iterations < self.stop_window:
            raise ConfigError("max_iterations", "must be >= stop_window")
        if self.removal_min_flags < 1:
            raise ConfigError("removal_min_flags", "must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be an unsigned 64-bit integer")
        if self.stop_on not in ("new", "any"):
            raise ConfigError("stop_on", "must be 'new' or 'any'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["outlier"] = self.outlier.to_dict()
        d["trainer"] = self.trainer.to_dict()
        return d


@dataclass(frozen=True)
class IterationRecord:
    index: int
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    flagged_ids: tuple[str, ...]
    new_flagged_ids: tuple[str, ...]
    validation_mae: float
    seed_used: int
    assessments: tuple[SubjectAssessment, ...] = ()

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed_used": self.seed_used,
            "validation_mae": self.validation_mae,
            "train_ids": list(self.train_ids),
            "validation_ids": list(self.validation_ids),
            "flagged_ids": list(self.flagged_ids),
            "new_flagged_ids": list(self.new_flagged_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(
            int(d["index"]),
            tuple(d["train_ids"]),
            tuple(d["validation_ids"]),
            tuple(d["flagged_ids"]),
            tuple(d["new_flagged_ids"]),
            float(d["validation_mae"]),
            int(d["seed_used"]),
        )


@dataclass
class FlagLedger:
    flag_count: dict[str, int] = field(default_factory=dict)
    history: list[IterationRecord] = field(default_factory=list)

    @classmethod
    def for_pool(cls, ids: Sequence[str]) -> "FlagLedger":
        return cls({i: 0 for i in ids})

    def add(self, record: IterationRecord) -> None:
        for sid in record.flagged_ids:
            self.flag_count[sid] = self.flag_count.get(sid, 0) + 1
        self.history.append(record)

    def ever_flagged(self) -> set[str]:
        return {sid for sid, c in self.flag_count.items() if c > 0}

    def check(self) -> None:
        """Recount flags from history; raise if the counters disagree."""
        recount = {sid: 0 for sid in self.flag_count}
        for rec in self.history:
            for sid in rec.flagged_ids:
                recount[sid] = recount.get(sid, 0) + 1
        if recount != self.flag_count:
            raise StrategyError("flag ledger counts disagree with iteration history")


def removal_set(ledger: FlagLedger, min_flags: int) -> set[str]:
    return {sid for sid, c in ledger.flag_count.items() if c >= min_flags}


def run_iteration(
    pool: Sequence[Subject],
    ledger: FlagLedger,
    config: IterateConfig,
    iteration_index: int,
    regressor: Regressor | None = None,
) -> IterationRecord:
    """One shuffle/split/train/flag cycle. Does not modify ``ledger``."""
    if len(pool) < 2:
        raise StrategyError(f"pool has {len(pool)} subjects; need at least 2")
    regressor = regressor if regressor is not None else HetRegressor(config.trainer)
    train_set, val_set = split_subjects(
        pool, config.train_fraction, derive_seed(config.master_seed, iteration_index, SPLIT)
    )
    seed = derive_seed(config.master_seed, iteration_index, TRAIN)
    try:
        model = regressor.fit(train_set, seed)
    except TrainingError as exc:
        raise TrainingError(f"iteration {iteration_index}: {exc}", exc.epoch, exc.batch) from exc

    assessments = []
    for subj, (means, logvars) in zip(val_set, regressor.predict(model, val_set)):
        mean_age, sigma = consolidate_arrays(means, logvars)
        assessments.append(assess(subj.id, subj.chronological_age, mean_age, sigma, config.outlier))

    flagged = tuple(sorted(a.subject_id for a in assessments if a.flagged))
    new = tuple(sid for sid in flagged if ledger.flag_count.get(sid, 0) == 0)
    mae = float(np.mean([a.deviation for a in assessments]))
    return IterationRecord(
        iteration_index,
        tuple(sorted(s.id for s in train_set)),
        tuple(sorted(s.id for s in val_set)),
        flagged,
        new,
        mae,
        seed,
        tuple(sorted(assessments, key=lambda a: a.subject_id)),
    )


@dataclass
class StrategyResult:
    ledger: FlagLedger
    cleaned: list[Subject]
    removed: list[str]
    final_model: Any
    truncated: bool

    @property
    def n_iterations(self) -> int:
        return len(self.ledger.history)


def run_strategy(
    pool: Sequence[Subject],
    config: IterateConfig,
    regressor: Regressor | None = None,
    on_iteration=None,
) -> StrategyResult:
    if len(pool) < 2:
        raise StrategyError(f"pool has {len(pool)} subjects; need at least 2")
    ids = [s.id for s in pool]
    if len(set(ids)) != len(ids):
        raise StrategyError("duplicate subject ids in pool")
    regressor = regressor if regressor is not None else HetRegressor(config.trainer)
    blind = [s.blind() for s in pool]
    ledger = FlagLedger.for_pool(ids)

    quiet_streak = 0
    stopped = False
    for t in range(1, config.max_iterations + 1):
        rec = run_iteration(blind, ledger, config, t, regressor)
        ledger.add(rec)
        quiet = not (rec.new_flagged_ids if config.stop_on == "new" else rec.flagged_ids)
        quiet_streak = quiet_streak + 1 if quiet else 0
        log.info(
            "iteration %d: %d flagged (%d new), validation MAE %.2f",
            t, len(rec.flagged_ids), len(rec.new_flagged_ids), rec.validation_mae,
        )
        if on_iteration is not None:
            on_iteration(rec)
        if quiet_streak >= config.stop_window:
            stopped = True
            break
    if not stopped:
        log.warning("stopping rule not met after %d iterations; run truncated", config.max_iterations)

    removed = removal_set(ledger, config.removal_min_flags)
    cleaned = [s for s in pool if s.id not in removed]
    if len(cleaned) < 2:
        raise StrategyError(
            f"only {len(cleaned)} subjects left after removing {len(removed)} flagged subjects"
        )
    final_model = regressor.fit(
        [s for s in blind if s.id not in removed], derive_seed(config.master_seed, 0, FINAL)
    )
    return StrategyResult(
        ledger, cleaned, [sid for sid in ids if sid in removed], final_model, not stopped
    )
