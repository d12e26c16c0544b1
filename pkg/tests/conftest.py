import math

import numpy as np
import pytest

from bioage.cohort import GeneratorConfig, Subject, generate_cohort


class ShiftStub:
    """Regressor stub: predicts CA + shift with a fixed sigma for every chunk."""

    def __init__(self, shift=0.0, sigma=1.0):
        self.shift = shift
        self.logvar = 2.0 * math.log(sigma)
        self.fits = []

    def fit(self, subjects, seed):
        self.fits.append((tuple(s.id for s in subjects), seed))
        return len(self.fits)

    def predict(self, model, subjects):
        return [
            (np.full(s.n_chunks, s.chronological_age + self.shift), np.full(s.n_chunks, self.logvar))
            for s in subjects
        ]


class ScriptedStub(ShiftStub):
    """Flags exactly ``schedule[iteration]`` (when validated); everyone else is exact."""

    def __init__(self, schedule):
        super().__init__()
        self.schedule = schedule

    def predict(self, model, subjects):
        out = []
        for s in subjects:
            bump = 100.0 if s.id in self.schedule(model, s.id) else 0.0
            out.append((np.full(s.n_chunks, s.chronological_age + bump), np.zeros(s.n_chunks)))
        return out


def make_subjects(n, K=2, d=3, ages=None):
    rng = np.random.default_rng(123)
    ages = ages if ages is not None else rng.uniform(48, 97, n)
    return [Subject(f"p{i:03d}", float(ages[i]), i % 2, rng.normal(size=(K, d))) for i in range(n)]


@pytest.fixture
def small_cohort():
    cfg = GeneratorConfig(
        n_typical=30, n_atypical_per_level={0.5: 4, 1: 3, 2: 3}, chunks_per_subject=3, chunk_dim=6, seed=11
    )
    return generate_cohort(cfg)
