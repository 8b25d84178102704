from __future__ import annotations

import numpy as np
import pytest
from conftest import make_dataset
from hypothesis import given, settings
from hypothesis import strategies as st

from admeasure.data import (
    EffectEstimate,
    ExperimentMeta,
    OutcomeEvent,
    UserRecord,
    validate_dataset,
    validate_records,
)
from admeasure.simulate import SimConfig, simulate_experiment


def ten_users():
    return make_dataset([1, 1, 1, 1, 1, 1, 0, 0, 0, 0], [1, 1, 0, 0, 1, 0, 0, 0, 0, 0], [1, 0, 0, 1, 0, 0, 1, 0, 0, 0])


def kinds(report):
    return [v.kind for v in report]


def test_well_formed_dataset_has_empty_report():
    assert validate_dataset(ten_users()) == []


def test_control_exposed_is_reported_once():
    ds = make_dataset([1, 0, 0], [1, 1, 0], [0, 0, 1])
    report = validate_dataset(ds)
    assert kinds(report) == ["control-exposed"]
    assert report[0].row == 1


def test_duplicate_id_is_reported_once():
    ds = make_dataset([1, 1, 0], [1, 0, 0], [0, 0, 1], ids=["a", "b", "a"])
    assert kinds(validate_dataset(ds)) == ["duplicate id"]


@pytest.mark.parametrize(
    "kw, kind",
    [
        (dict(z=[1, 2], w=[0, 0], y=[0, 0]), "non-binary value"),
        (dict(z=[1, 1], w=[0, 1], y=[0, 3]), "non-binary outcome"),
        (dict(z=[1, 1], w=[0, 1], y=[0, 1], dense=[[0.0], [np.nan]]), "non-finite feature"),
        (dict(z=[1, 1], w=[0, 1], y=[0, 1], action_rate=[0.5, 1.5]), "action rate out of range"),
        (dict(z=[1, 1], w=[0, 1], y=[0, 1], sparse=[[0], [7]]), "sparse index out of range"),
        (dict(z=[1], w=[0], y=[0]), "too few users"),
        (dict(z=[0, 0], w=[0, 0], y=[0, 1]), "empty test group"),
    ],
)
def test_each_violation_kind(kw, kind):
    assert kind in kinds(validate_dataset(make_dataset(**kw)))


def test_ragged_records():
    rec = UserRecord("a", 1, 0, {"purchase": 0}, (0.0, 1.0), frozenset(), 0.5, 0)
    schema = ten_users().schema
    assert kinds(validate_records([rec], schema)) == ["ragged features"]


def test_missing_outcome_column():
    ds = ten_users()
    meta = ExperimentMeta("t", (OutcomeEvent("purchase", "lower"), OutcomeEvent("visit", "upper")), 0.5)
    bad = type(ds)(meta, ds.schema, ds.user_ids, ds.z, ds.w, ds.y, ds.dense, ds.sparse_indptr,
                   ds.sparse_indices, ds.action_rate, ds.prior_outcome)
    assert kinds(validate_dataset(bad)) == ["missing outcome"]


def test_validation_is_idempotent_and_pure():
    ds = make_dataset([1, 0, 0], [1, 1, 0], [0, 0, 1], ids=["a", "a", "b"])
    snapshot = (ds.z.copy(), ds.w.copy())
    assert validate_dataset(ds) == validate_dataset(ds)
    assert np.array_equal(ds.z, snapshot[0]) and np.array_equal(ds.w, snapshot[1])


def test_arrays_are_read_only():
    ds = ten_users()
    with pytest.raises(ValueError):
        ds.w[0] = 0


def test_records_round_trip():
    ds = ten_users()
    again = type(ds).from_records(list(ds.users), ds.meta, ds.schema)
    assert again == ds


def test_subset_and_test_group():
    ds = ten_users()
    tg = ds.test_group()
    assert tg.n == 6 and (tg.z == 1).all()
    assert tg.user_ids == ds.user_ids[:6]


def test_unknown_outcome_event():
    with pytest.raises(KeyError, match="unknown outcome event"):
        ten_users().outcome("visit")


def test_meta_rejects_bad_split():
    with pytest.raises(ValueError):
        ExperimentMeta("x", (OutcomeEvent("y", "lower"),), 1.0)
    with pytest.raises(ValueError):
        OutcomeEvent("y", "middle")


def test_effect_estimate_round_trip():
    est = EffectEstimate("dml", 0.01, 0.002, 0.5, 0.1, 100, {"k": [1, 2]})
    assert EffectEstimate.from_dict(est.to_dict()) == est
    assert est.lift_defined
    assert not EffectEstimate("spsm", 0.1, 0.1, None, None, 10).lift_defined
    with pytest.raises(ValueError):
        EffectEstimate("bogus", 0.0, 0.0, 0.0, 0.0, 1)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(10, 400),
    split=st.floats(0.1, 0.9),
    hidden=st.floats(0, 1),
    vocab=st.integers(0, 30),
)
def test_simulator_output_always_validates(seed, n, split, hidden, vocab):
    cfg = SimConfig(seed=seed, n_users=n, planned_split=split, hidden_fraction=hidden, sparse_vocab=vocab, dense_dim=4)
    try:
        ds, _ = simulate_experiment(cfg)
    except ValueError as exc:
        # a tiny draw may put nobody in the test group; that is refused, never emitted
        assert "no user to the test group" in str(exc)
        return
    assert validate_dataset(ds) == []
