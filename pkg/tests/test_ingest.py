from __future__ import annotations

import json
from math import comb

import numpy as np
import pytest
from scipy import stats
from conftest import make_dataset
from hypothesis import given, settings
from hypothesis import strategies as st

from admeasure.ingest import (
    EXACT_MAX_N,
    DatasetValidationError,
    ParseError,
    binomial_split_pvalue,
    load_dataset,
    pvalue_uniformity,
    randomization_check,
    sidecar_path,
    write_dataset,
)
from admeasure.simulate import SimConfig, funnel_events, simulate_experiment

ROWS = [
    {"user_id": "a", "z": 1, "w": 1, "y": {"purchase": 1}, "dense": [0.5], "sparse": [1, 3], "action_rate": 0.2,
     "prior_outcome": 0},
    {"user_id": "b", "z": 1, "w": 0, "y": {"purchase": 0}, "dense": [-1.0], "sparse": [], "action_rate": 0.1,
     "prior_outcome": 1},
    {"user_id": "c", "z": 0, "w": 0, "y": {"purchase": 0}, "dense": [2.0], "sparse": [4], "action_rate": 0.9,
     "prior_outcome": 0},
]
SIDECAR = {
    "meta": {"experiment_id": "fx", "outcome_events": [{"name": "purchase", "funnel": "lower"}], "planned_split": 0.5},
    "schema": {"dense_names": ["x0"], "sparse_vocab": 5},
}


def write_fixture(tmp_path, rows=ROWS, sidecar=SIDECAR, name="fx.jsonl"):
    path = tmp_path / name
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    sidecar_path(path).write_text(json.dumps(sidecar))
    return path


def test_three_row_jsonl_fixture(tmp_path):
    ds = load_dataset(write_fixture(tmp_path))
    assert ds.n == 3
    assert ds.user_ids == ("a", "b", "c")
    assert ds.sparse_of(0).tolist() == [1, 3]
    assert ds.outcome("purchase").tolist() == [1, 0, 0]


def test_csv_header_mismatch_names_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("user_id,z,w,y,x0,sparse,prior_outcome\nu,1,0,0,0.1,,0\n")
    sidecar_path(path).write_text(json.dumps(SIDECAR))
    with pytest.raises(ParseError, match="action_rate"):
        load_dataset(path)


def test_csv_round_trip(tmp_path):
    ds = load_dataset(write_fixture(tmp_path))
    again = load_dataset(write_dataset(ds, tmp_path / "fx.csv"))
    assert again == ds


def test_simulator_output_round_trips(tmp_path):
    ds, _ = simulate_experiment(SimConfig(n_users=300, seed=4, extra_events=funnel_events()[:2]))
    again = load_dataset(write_dataset(ds, tmp_path / "sim.jsonl"))
    assert again == ds
    for name in ("z", "w", "dense", "action_rate", "prior_outcome", "sparse_indptr", "sparse_indices"):
        assert np.array_equal(getattr(again, name), getattr(ds, name)), name
    for ev in ds.y:
        assert np.array_equal(again.outcome(ev), ds.outcome(ev))


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("not json\n", "invalid JSON"),
        ('[1, 2]\n', "expected a JSON object"),
        ('{"user_id": "a"}\n', "missing key"),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path, text, fragment):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(ROWS[0]) + "\n" + text)
    sidecar_path(path).write_text(json.dumps(SIDECAR))
    with pytest.raises(ParseError, match=fragment) as info:
        load_dataset(path)
    assert info.value.line == 2


def test_missing_outcome_key(tmp_path):
    row = dict(ROWS[0], y={"visit": 1})
    with pytest.raises(ParseError, match="lacks outcome"):
        load_dataset(write_fixture(tmp_path, rows=[row]))


def test_missing_sidecar(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps(ROWS[0]) + "\n")
    with pytest.raises(ParseError, match="sidecar"):
        load_dataset(path)


def test_invalid_dataset_is_rejected_with_report(tmp_path):
    rows = [dict(ROWS[0]), dict(ROWS[1]), dict(ROWS[2], w=1)]
    with pytest.raises(DatasetValidationError) as info:
        load_dataset(write_fixture(tmp_path, rows=rows))
    assert [v.kind for v in info.value.report] == ["control-exposed"]


def test_ragged_rows_rejected(tmp_path):
    rows = [dict(ROWS[0], dense=[0.1, 0.2]), ROWS[1]]
    with pytest.raises(DatasetValidationError, match="ragged"):
        load_dataset(write_fixture(tmp_path, rows=rows))


def brute_force_pvalue(k: int, n: int, p: float) -> float:
    probs = [comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(n + 1)]
    return min(1.0, sum(q for q in probs if q <= probs[k] * (1 + 1e-7)))


def test_binomial_examples():
    assert binomial_split_pvalue(5, 10, 0.5)[0] == pytest.approx(1.0)
    p, method = binomial_split_pvalue(10, 10, 0.5)
    assert method == "exact"
    assert p == pytest.approx(2 * 0.5**10, rel=1e-12)
    assert p == pytest.approx(brute_force_pvalue(10, 10, 0.5), rel=1e-12)
    p, method = binomial_split_pvalue(900_000, 1_000_000, 0.9)
    assert method == "normal" and p == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 60), frac=st.floats(0, 1), split=st.floats(0.05, 0.95))
def test_exact_branch_matches_enumeration(n, frac, split):
    k = round(frac * n)
    assert binomial_split_pvalue(k, n, split)[0] == pytest.approx(brute_force_pvalue(k, n, split), abs=1e-9)


def test_exact_and_normal_agree_at_cutoff():
    # symmetric split: the minimum-likelihood exact test and the symmetric normal
    # approximation target the same two-sided p-value
    n, split = EXACT_MAX_N, 0.5
    for k in range(4_800, 5_201, 4):
        exact, method = binomial_split_pvalue(k, n, split)
        assert method == "exact"
        z = max(abs(k - n * split) - 0.5, 0) / (n * split * (1 - split)) ** 0.5
        approx = min(1.0, 2 * stats.norm.sf(z))
        assert abs(exact - approx) < 0.005, k
        assert binomial_split_pvalue(k, n + 1, split)[1] == "normal"


def test_binomial_rejects_bad_input():
    with pytest.raises(ValueError):
        binomial_split_pvalue(1, 10, 1.0)
    with pytest.raises(ValueError):
        binomial_split_pvalue(11, 10, 0.5)


def test_randomization_check_on_dataset():
    ds = make_dataset([1] * 5 + [0] * 5, [0] * 10, [0] * 10)
    res = randomization_check(ds)
    assert (res.n_test, res.n_total, res.method) == (5, 10, "exact")
    assert res.p_value == pytest.approx(1.0)


def test_pvalue_uniformity_examples():
    # counting shares strictly below 0.05 / 0.25 / 0.75 gives 1/4, 1/4, 2/4
    assert pvalue_uniformity([0.01, 0.5, 0.9, 0.99]) == (0.25, 0.25, 0.5)
    assert pvalue_uniformity([1.0] * 7) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        pvalue_uniformity([])


@pytest.mark.slow
def test_randomization_pvalues_are_uniform():
    pvals = [randomization_check(simulate_experiment(SimConfig(n_users=1_000, seed=s, dense_dim=1,
                                                                sparse_vocab=0))[0]).p_value for s in range(2_000)]
    shares = pvalue_uniformity(pvals)
    for share, t in zip(shares, (0.05, 0.25, 0.75)):
        assert abs(share - t) <= 3 * (t * (1 - t) / len(pvals)) ** 0.5, (share, t)
