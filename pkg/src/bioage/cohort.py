"""Subjects, feature chunks and the synthetic cohort generator.

Every subject carries a chronological age, a sex covariate and ``K`` feature
chunks.  The generator embeds a latent biological age ``BA = CA + offset``
linearly into chunk space, so typical and atypical agers differ only through
their (hidden) offset.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigError


class Group(str, enum.Enum):
    """Cohort group. Atypical levels mirror the CDR scale (0.5, 1, 2)."""

    TYPICAL = "typical"
    CDR05 = "cdr0.5"
    CDR1 = "cdr1"
    CDR2 = "cdr2"

    @property
    def level(self) -> float | None:
        return _GROUP_LEVELS[self]

    @property
    def atypical(self) -> bool:
        return self is not Group.TYPICAL

    @classmethod
    def from_level(cls, level: float) -> "Group":
        for g, lv in _GROUP_LEVELS.items():
            if lv is not None and math.isclose(lv, float(level)):
                return g
        raise ValueError(f"unknown atypical level {level!r}; expected 0.5, 1 or 2")


_GROUP_LEVELS: dict[Group, float | None] = {
    Group.TYPICAL: None,
    Group.CDR05: 0.5,
    Group.CDR1: 1.0,
    Group.CDR2: 2.0,
}
ATYPICAL_LEVELS = (0.5, 1.0, 2.0)


@dataclass(frozen=True, eq=False)
class Subject:
    """One individual.

    ``group`` and ``true_offset`` are generator ground truth. The training and
    flagging code only ever sees :meth:`blind` copies where both are ``None``.
    """

    id: str
    chronological_age: float
    sex: int
    chunks: np.ndarray  # (K, d)
    group: Group | None = None
    true_offset: float | None = None

    def __post_init__(self) -> None:
        chunks = np.asarray(self.chunks, dtype=np.float64)
        if chunks.ndim != 2 or chunks.shape[0] < 1 or chunks.shape[1] < 1:
            raise ValueError(f"subject {self.id}: chunks must be a non-empty (K, d) array")
        if not np.all(np.isfinite(chunks)):
            raise ValueError(f"subject {self.id}: non-finite chunk values")
        if self.sex not in (0, 1):
            raise ValueError(f"subject {self.id}: sex must be 0 or 1")
        chunks.setflags(write=False)
        object.__setattr__(self, "chunks", chunks)

    @property
    def n_chunks(self) -> int:
        return self.chunks.shape[0]

    @property
    def chunk_dim(self) -> int:
        return self.chunks.shape[1]

    def blind(self) -> "Subject":
        """Copy without ground truth."""
        return Subject(self.id, self.chronological_age, self.sex, self.chunks)


@dataclass
class GeneratorConfig:
    n_typical: int = 400
    n_atypical_per_level: dict[float, int] = field(
        default_factory=lambda: {0.5: 34, 1.0: 33, 2.0: 33}
    )
    chunks_per_subject: int = 8
    chunk_dim: int = 32
    age_range: tuple[float, float] = (48.0, 97.0)
    typical_jitter: float = 0.5
    atypical_offsets: dict[float, float] = field(
        default_factory=lambda: {0.5: 6.0, 1.0: 10.0, 2.0: 15.0}
    )
    atypical_min_offset: float = 1.0
    chunk_noise_sd: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        self.n_atypical_per_level = _level_map(self.n_atypical_per_level, "n_atypical_per_level")
        self.atypical_offsets = _level_map(self.atypical_offsets, "atypical_offsets")
        self.age_range = tuple(float(a) for a in self.age_range)  # type: ignore[assignment]
        self.validate()

    def validate(self) -> None:
        if self.chunks_per_subject < 1:
            raise ConfigError("chunks_per_subject", "must be >= 1")
        if self.chunk_dim < 1:
            raise ConfigError("chunk_dim", "must be >= 1")
        if len(self.age_range) != 2 or not self.age_range[0] < self.age_range[1]:
            raise ConfigError("age_range", "must be [lo, hi] with lo < hi")
        if self.n_typical < 0:
            raise ConfigError("n_typical", "must be >= 0")
        for lv, n in self.n_atypical_per_level.items():
            if n < 0:
                raise ConfigError("n_atypical_per_level", f"count for level {lv} must be >= 0")
        for lv, n in self.n_atypical_per_level.items():
            if n > 0 and lv not in self.atypical_offsets:
                raise ConfigError("atypical_offsets", f"missing offset for level {lv}")
        if self.typical_jitter < 0:
            raise ConfigError("typical_jitter", "must be >= 0")
        if self.chunk_noise_sd < 0:
            raise ConfigError("chunk_noise_sd", "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")

    @property
    def n_subjects(self) -> int:
        return self.n_typical + sum(self.n_atypical_per_level.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_typical": self.n_typical,
            "n_atypical_per_level": {_level_key(k): v for k, v in self.n_atypical_per_level.items()},
            "chunks_per_subject": self.chunks_per_subject,
            "chunk_dim": self.chunk_dim,
            "age_range": list(self.age_range),
            "typical_jitter": self.typical_jitter,
            "atypical_offsets": {_level_key(k): v for k, v in self.atypical_offsets.items()},
            "atypical_min_offset": self.atypical_min_offset,
            "chunk_noise_sd": self.chunk_noise_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GeneratorConfig":
        return build_dataclass(cls, data, "generator")


def _level_key(level: float) -> str:
    return f"{float(level):g}"


def _level_map(mapping: dict, name: str) -> dict[float, Any]:
    out = {}
    for k, v in dict(mapping).items():
        try:
            lv = float(k)
        except (TypeError, ValueError):
            raise ConfigError(name, f"key {k!r} is not a CDR level") from None
        if not any(math.isclose(lv, a) for a in ATYPICAL_LEVELS):
            raise ConfigError(name, f"key {k!r} is not one of 0.5, 1, 2")
        out[lv] = v
    return dict(sorted(out.items()))


def build_dataclass(cls, data: Any, path: str):
    """Instantiate ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.field}", exc.reason) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def load_generator_config(path: str | Path) -> GeneratorConfig:
    with open(path) as fh:
        return GeneratorConfig.from_dict(json.load(fh))


def embedding_matrix(config: GeneratorConfig) -> np.ndarray:
    """The (d, 2) map from ``[BA_normalized, sex]`` to chunk space."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    return rng.standard_normal((config.chunk_dim, 2))


def normalize_age(age, age_range: Sequence[float]):
    lo, hi = age_range
    return 2.0 * (np.asarray(age, dtype=np.float64) - lo) / (hi - lo) - 1.0


def generate_cohort(config: GeneratorConfig, stream: int = 1, id_prefix: str = "s") -> list[Subject]:
    """Draw a cohort. Deterministic in ``(config, stream)``.

    All streams share the same embedding matrix, so ``stream=2`` gives an
    independent held-out cohort from the same population.
    """
    config.validate()
    if stream < 1:
        raise ValueError("stream 0 is reserved for the embedding matrix")
    E = embedding_matrix(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, stream]))
    lo, hi = config.age_range
    jitter = config.typical_jitter
    K, d = config.chunks_per_subject, config.chunk_dim

    plan: list[Group] = [Group.TYPICAL] * config.n_typical
    for lv, n in config.n_atypical_per_level.items():
        plan += [Group.from_level(lv)] * n

    subjects = []
    for i, group in enumerate(plan):
        ca = float(rng.uniform(lo, hi))
        sex = int(rng.integers(0, 2))
        if group is Group.TYPICAL:
            offset = float(np.clip(rng.normal(0.0, jitter), -jitter, jitter))
        else:
            mu = config.atypical_offsets[group.level]
            offset = max(float(rng.normal(mu, jitter)), config.atypical_min_offset)
        latent = np.array([normalize_age(ca + offset, config.age_range), sex], dtype=np.float64)
        noise = rng.normal(0.0, 1.0, size=(K, d)) * config.chunk_noise_sd
        chunks = (E @ latent)[None, :] + noise
        subjects.append(Subject(f"{id_prefix}{i:05d}", ca, sex, chunks, group, offset))
    return subjects


def split_subjects(
    subjects: Sequence[Subject], train_fraction: float, rng_state
) -> tuple[list[Subject], list[Subject]]:
    """Shuffle and split at subject level.

    ``rng_state`` is anything :func:`numpy.random.default_rng` accepts. The
    train side gets ``round(train_fraction * n)`` subjects (half-up), clamped
    so neither side is empty.
    """
    n = len(subjects)
    if n < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(math.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(rng_state).permutation(n)
    return [subjects[i] for i in order[:n_train]], [subjects[i] for i in order[n_train:]]


# -- CSV ----------------------------------------------------------------------

def write_cohort_csv(subjects: Iterable[Subject], path: str | Path) -> int:
    """One row per chunk; returns the number of rows written."""
    subjects = list(subjects)
    d = subjects[0].chunk_dim if subjects else 0
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "ca", "sex", "group", "true_offset", "chunk_index"] + [f"v{j}" for j in range(d)])
        for s in subjects:
            group = s.group.value if s.group is not None else ""
            offset = repr(s.true_offset) if s.true_offset is not None else ""
            for k, chunk in enumerate(s.chunks):
                w.writerow([s.id, repr(s.chronological_age), s.sex, group, offset, k] + [repr(float(v)) for v in chunk])
                rows += 1
    return rows


def read_cohort_csv(path: str | Path) -> list[Subject]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:6] != ["id", "ca", "sex", "group", "true_offset", "chunk_index"]:
            raise ValueError(f"{path}: not a cohort CSV")
        rows: dict[str, list] = {}
        for row in reader:
            sid = row[0]
            if sid not in rows:
                rows[sid] = [row, []]
            rows[sid][1].append((int(row[5]), [float(v) for v in row[6:]]))
    subjects = []
    for sid, (first, chunks) in rows.items():
        chunks.sort(key=lambda c: c[0])
        subjects.append(
            Subject(
                sid,
                float(first[1]),
                int(first[2]),
                np.array([c[1] for c in chunks]),
                Group(first[3]) if first[3] else None,
                float(first[4]) if first[4] else None,
            )
        )
    return subjects
