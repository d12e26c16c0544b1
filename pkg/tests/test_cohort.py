import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bioage.cohort import (
    GeneratorConfig,
    Group,
    embedding_matrix,
    generate_cohort,
    load_generator_config,
    normalize_age,
    read_cohort_csv,
    split_subjects,
    write_cohort_csv,
)
from bioage.errors import ConfigError

from conftest import make_subjects


def small(**kw):
    base = dict(n_typical=20, n_atypical_per_level={0.5: 3, 1: 3, 2: 3}, chunks_per_subject=3, chunk_dim=5, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def same_cohort(a, b):
    return len(a) == len(b) and all(
        x.id == y.id
        and x.chronological_age == y.chronological_age
        and x.sex == y.sex
        and x.group == y.group
        and x.true_offset == y.true_offset
        and x.chunks.tobytes() == y.chunks.tobytes()
        for x, y in zip(a, b)
    )


def test_empty_config_gives_empty_cohort():
    assert generate_cohort(small(n_typical=0, n_atypical_per_level={0.5: 0, 1: 0, 2: 0})) == []


def test_zero_noise_chunks_identical():
    for s in generate_cohort(small(chunk_noise_sd=0.0, chunks_per_subject=2)):
        np.testing.assert_array_equal(s.chunks[0], s.chunks[1])


def test_deterministic_and_seed_sensitive():
    cfg = small()
    assert same_cohort(generate_cohort(cfg), generate_cohort(cfg))
    other = generate_cohort(dataclasses.replace(cfg, seed=4))
    assert not np.array_equal(generate_cohort(cfg)[0].chunks, other[0].chunks)


def test_streams_share_embedding_but_not_subjects():
    cfg = small()
    a, b = generate_cohort(cfg, stream=1), generate_cohort(cfg, stream=2)
    assert a[0].chronological_age != b[0].chronological_age
    with pytest.raises(ValueError):
        generate_cohort(cfg, stream=0)


def test_subject_invariants():
    cfg = small(n_typical=200, n_atypical_per_level={0.5: 50, 1: 50, 2: 50})
    subjects = generate_cohort(cfg)
    lo, hi = cfg.age_range
    for s in subjects:
        assert lo <= s.chronological_age <= hi
        assert s.sex in (0, 1)
        assert s.chunks.shape == (cfg.chunks_per_subject, cfg.chunk_dim)
        if s.group is Group.TYPICAL:
            assert abs(s.true_offset) <= cfg.typical_jitter
        else:
            assert s.true_offset >= cfg.atypical_min_offset
    counts = {g: sum(s.group is g for s in subjects) for g in Group}
    assert counts == {Group.TYPICAL: 200, Group.CDR05: 50, Group.CDR1: 50, Group.CDR2: 50}
    # atypical offsets centre on the configured means
    for g, delta in ((Group.CDR05, 6.0), (Group.CDR1, 10.0), (Group.CDR2, 15.0)):
        offs = [s.true_offset for s in subjects if s.group is g]
        assert abs(np.mean(offs) - delta) < 0.5


def test_zero_noise_signal_is_recoverable():
    """With no noise, solving chunk = E [ba_norm, sex] recovers BA and sex exactly."""
    cfg = small(chunk_noise_sd=0.0)
    E = embedding_matrix(cfg)
    assert np.linalg.matrix_rank(E) == 2
    for s in generate_cohort(cfg):
        z, *_ = np.linalg.lstsq(E, s.chunks[0], rcond=None)
        expected = normalize_age(s.chronological_age + s.true_offset, cfg.age_range)
        assert z[0] == pytest.approx(expected, abs=1e-10)
        assert z[1] == pytest.approx(s.sex, abs=1e-10)


def test_blind_drops_ground_truth(small_cohort):
    b = small_cohort[0].blind()
    assert b.group is None and b.true_offset is None
    assert b.id == small_cohort[0].id and b.chunks is small_cohort[0].chunks


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"chunks_per_subject": 0}, "chunks_per_subject"),
        ({"chunk_dim": 0}, "chunk_dim"),
        ({"age_range": (90, 50)}, "age_range"),
        ({"n_typical": -1}, "n_typical"),
        ({"chunk_noise_sd": -0.1}, "chunk_noise_sd"),
        ({"typical_jitter": -1}, "typical_jitter"),
        ({"atypical_offsets": {3: 1.0}}, "atypical_offsets"),
    ],
)
def test_invalid_config_names_field(kw, field):
    with pytest.raises(ConfigError) as exc:
        small(**kw)
    assert exc.value.field == field


def test_config_json_roundtrip_and_unknown_key(tmp_path):
    cfg = small()
    p = tmp_path / "g.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_generator_config(p) == cfg
    p.write_text(json.dumps({**cfg.to_dict(), "chunk_noise": 1}))
    with pytest.raises(ConfigError, match="chunk_noise"):
        load_generator_config(p)


def test_csv_roundtrip_is_exact(tmp_path, small_cohort):
    path = tmp_path / "c.csv"
    rows = write_cohort_csv(small_cohort, path)
    assert rows == sum(s.n_chunks for s in small_cohort)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:6] == ["id", "ca", "sex", "group", "true_offset", "chunk_index"]
    assert header[6:] == [f"v{j}" for j in range(small_cohort[0].chunk_dim)]
    assert same_cohort(read_cohort_csv(path), small_cohort)


# -- split_subjects -----------------------------------------------------------

def test_split_even():
    subjects = make_subjects(10)
    tr, va = split_subjects(subjects, 0.5, 0)
    assert len(tr) == 5 and len(va) == 5
    assert {s.id for s in tr} | {s.id for s in va} == {s.id for s in subjects}


def test_split_clamps_to_non_empty():
    tr, va = split_subjects(make_subjects(3), 0.9, 0)
    assert (len(tr), len(va)) == (2, 1)
    tr, va = split_subjects(make_subjects(3), 0.01, 0)
    assert (len(tr), len(va)) == (1, 2)


def test_split_repeatable():
    subjects = make_subjects(20)
    a = split_subjects(subjects, 0.5, 42)
    b = split_subjects(subjects, 0.5, 42)
    assert [s.id for s in a[0]] == [s.id for s in b[0]]
    c = split_subjects(subjects, 0.5, 43)
    assert [s.id for s in a[0]] != [s.id for s in c[0]]


def test_split_errors():
    with pytest.raises(ValueError):
        split_subjects(make_subjects(1), 0.5, 0)
    with pytest.raises(ValueError):
        split_subjects(make_subjects(4), 1.0, 0)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 60), frac=st.floats(0.001, 0.999), seed=st.integers(0, 2**32))
def test_split_partition_property(n, frac, seed):
    subjects = make_subjects(n)
    tr, va = split_subjects(subjects, frac, seed)
    ids_tr, ids_va = {s.id for s in tr}, {s.id for s in va}
    assert not ids_tr & ids_va
    assert ids_tr | ids_va == {s.id for s in subjects}
    assert tr and va
