import dataclasses

import numpy as np
import pytest

from bioage.cohort import GeneratorConfig, generate_cohort, split_subjects
from bioage.consolidate import OutlierConfig
from bioage.errors import ConfigError, StrategyError
from bioage.hetreg import TrainConfig
from bioage.iterate import (
    FINAL,
    SPLIT,
    TRAIN,
    FlagLedger,
    HetRegressor,
    IterateConfig,
    IterationRecord,
    derive_seed,
    removal_set,
    run_iteration,
    run_strategy,
)

from conftest import ScriptedStub, ShiftStub, make_subjects


def config(**kw):
    return IterateConfig(**kw)


def test_derive_seed_distinct_and_stable():
    seeds = {derive_seed(7, t, p) for t in range(20) for p in (SPLIT, TRAIN, FINAL)}
    assert len(seeds) == 60
    assert derive_seed(7, 3, TRAIN) == derive_seed(7, 3, TRAIN)
    assert derive_seed(7, 3, TRAIN) != derive_seed(8, 3, TRAIN)


def test_never_flagging_stops_after_window():
    pool = make_subjects(12)
    stub = ShiftStub(shift=0.0)
    res = run_strategy(pool, config(), stub)
    assert res.n_iterations == 3 and not res.truncated
    assert res.removed == [] and len(res.cleaned) == 12
    # the final model saw the whole pool with the dedicated seed
    assert sorted(stub.fits[-1][0]) == sorted(s.id for s in pool)
    assert stub.fits[-1][1] == derive_seed(0, 0, FINAL)


@pytest.mark.parametrize("window", [1, 2, 5])
def test_window_length_respected(window):
    res = run_strategy(make_subjects(8), config(stop_window=window, max_iterations=10), ShiftStub())
    assert res.n_iterations == window


def test_always_flagging_hits_the_cap():
    res = run_strategy(make_subjects(10), config(stop_on="any", max_iterations=7, removal_min_flags=7), ShiftStub(100.0))
    assert res.n_iterations == 7 and res.truncated
    assert [r.index for r in res.ledger.history] == list(range(1, 8))


def test_everyone_removed_is_an_error():
    with pytest.raises(StrategyError, match="left"):
        run_strategy(make_subjects(10), config(stop_on="any", max_iterations=6, removal_min_flags=1), ShiftStub(100.0))


def test_first_time_flags_drive_stopping():
    # with every validated subject flagged, "new" flags dry up once all were seen
    res = run_strategy(make_subjects(10), config(max_iterations=50, removal_min_flags=50), ShiftStub(100.0))
    assert not res.truncated
    assert res.ledger.ever_flagged() == {s.id for s in make_subjects(10)}
    assert all(not r.new_flagged_ids for r in res.ledger.history[-3:])
    assert res.ledger.history[-4].new_flagged_ids


def _seed_validating(pool, needs):
    """First master seed whose splits put ``needs[t]`` in validation at iteration t."""
    for master in range(1000):
        ok = True
        for t, ids in needs.items():
            _, val = split_subjects(pool, 0.5, derive_seed(master, t, SPLIT))
            ok &= set(ids) <= {s.id for s in val}
        if ok:
            return master
    raise AssertionError("no suitable seed")


def test_scripted_removal():
    pool = make_subjects(10)
    a, b = pool[0].id, pool[1].id
    master = _seed_validating(pool, {1: [a, b], 2: [a]})

    def schedule(model, sid):
        # model is the fit counter, i.e. the iteration number
        return {a, b} if model == 1 else {a} if model == 2 else set()

    stub = ScriptedStub(schedule)
    res = run_strategy(pool, config(master_seed=master), stub)
    h = res.ledger.history
    assert h[0].flagged_ids == tuple(sorted((a, b))) and h[0].new_flagged_ids == h[0].flagged_ids
    assert h[1].flagged_ids == (a,) and h[1].new_flagged_ids == ()
    assert res.n_iterations == 4
    assert res.ledger.flag_count[a] == 2 and res.ledger.flag_count[b] == 1
    assert res.removed == [a]
    assert b in {s.id for s in res.cleaned} and a not in {s.id for s in res.cleaned}
    assert a not in stub.fits[-1][0] and b in stub.fits[-1][0]


def test_split_replay_and_pool_conservation():
    pool = make_subjects(15)
    cfg = config(master_seed=99, stop_on="any", max_iterations=5, removal_min_flags=10)
    res = run_strategy(pool, cfg, ShiftStub(3.0, sigma=1.0))
    ids = {s.id for s in pool}
    for rec in res.ledger.history:
        assert set(rec.train_ids) | set(rec.validation_ids) == ids
        assert not set(rec.train_ids) & set(rec.validation_ids)
        tr, va = split_subjects(pool, cfg.train_fraction, derive_seed(99, rec.index, SPLIT))
        assert rec.validation_ids == tuple(sorted(s.id for s in va))
        assert rec.seed_used == derive_seed(99, rec.index, TRAIN)
        assert set(rec.flagged_ids) <= set(rec.validation_ids)
        assert len(rec.assessments) == len(rec.validation_ids)
    res.ledger.check()


def test_run_iteration_does_not_touch_ledger():
    pool = make_subjects(6)
    ledger = FlagLedger.for_pool([s.id for s in pool])
    before = dict(ledger.flag_count)
    rec = run_iteration(pool, ledger, config(), 1, ShiftStub(100.0))
    assert ledger.flag_count == before and ledger.history == []
    assert rec.flagged_ids == rec.validation_ids == rec.new_flagged_ids
    assert rec.validation_mae == pytest.approx(100.0)


def test_ledger_check_detects_tampering():
    ledger = FlagLedger.for_pool(["a", "b"])
    ledger.add(IterationRecord(1, ("a",), ("b",), ("b",), ("b",), 1.0, 0))
    ledger.check()
    ledger.flag_count["a"] = 1
    with pytest.raises(StrategyError):
        ledger.check()


def test_removal_threshold():
    ledger = FlagLedger({"a": 0, "b": 1, "c": 2, "d": 5})
    assert removal_set(ledger, 2) == {"c", "d"}
    assert removal_set(ledger, 1) == {"b", "c", "d"}


def test_record_dict_roundtrip():
    rec = IterationRecord(3, ("a", "b"), ("c",), ("c",), (), 1.25, 12345678901234567890)
    assert IterationRecord.from_dict(rec.to_dict()) == rec


def test_strategy_blinds_the_pool(small_cohort):
    class Spy(ShiftStub):
        def fit(self, subjects, seed):
            assert all(s.group is None and s.true_offset is None for s in subjects)
            return super().fit(subjects, seed)

    run_strategy(small_cohort, config(), Spy())


def test_small_pool_errors():
    with pytest.raises(StrategyError):
        run_strategy(make_subjects(1), config(), ShiftStub())
    dup = make_subjects(3)
    dup[1] = dataclasses.replace(dup[1], id=dup[0].id)
    with pytest.raises(StrategyError, match="duplicate"):
        run_strategy(dup, config(), ShiftStub())


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"train_fraction": 1.0}, "train_fraction"),
        ({"stop_window": 0}, "stop_window"),
        ({"max_iterations": 2}, "max_iterations"),
        ({"removal_min_flags": 0}, "removal_min_flags"),
        ({"stop_on": "sometimes"}, "stop_on"),
        ({"outlier": {"R": -1}}, "R"),
    ],
)
def test_config_validation(kw, field):
    with pytest.raises(ConfigError) as exc:
        config(**kw)
    assert exc.value.field.endswith(field)


def test_nested_dicts_become_configs():
    cfg = config(outlier={"R": 2.5}, trainer={"epochs": 3})
    assert cfg.outlier == OutlierConfig(2.5) and cfg.trainer.epochs == 3
    with pytest.raises(ConfigError, match="trainer"):
        config(trainer={"epoch": 3})


def test_real_regressor_is_deterministic():
    gen = GeneratorConfig(n_typical=24, n_atypical_per_level={0.5: 2, 1: 2, 2: 2}, chunks_per_subject=2, chunk_dim=6, seed=5)
    pool = generate_cohort(gen)
    cfg = config(trainer=TrainConfig(hidden_sizes=[4], fusion_width=3, epochs=3), max_iterations=4, master_seed=3)
    a = run_strategy(pool, cfg)
    b = run_strategy(pool, cfg)
    assert [r.to_dict() for r in a.ledger.history] == [r.to_dict() for r in b.ledger.history]
    assert a.removed == b.removed
    assert a.final_model.to_bytes() == b.final_model.to_bytes()
    preds = HetRegressor(cfg.trainer).predict(a.final_model, pool[:3])
    assert [p[0].shape for p in preds] == [(2,)] * 3
    assert all(np.all(np.isfinite(m)) for m, _ in preds)
