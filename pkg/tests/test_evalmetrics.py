from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admeasure import evalmetrics as em


def test_error_metric_examples():
    assert em.ape(0.30, 0.20) == pytest.approx(0.5)
    assert em.ape(0.10, 0.20) == pytest.approx(0.5)
    assert em.ape(0.1, 0.0) is None and em.ape(0.1, -0.2) is None
    assert em.ae(0.1, -0.2) == pytest.approx(0.3)
    assert em.rpb(1.0, 0.2) == pytest.approx(20.0)
    assert em.rpb(0.5, 1.0) == pytest.approx(200.0)
    assert em.rpb(0.0, 0.3) is None


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.001, 10), b=st.floats(0, 10))
def test_rpb_agrees_with_its_definition(a, b):
    assert em.rpb(a, b) == pytest.approx((1 - (a - b) / a) * 100, rel=1e-9, abs=1e-9)
    assert (em.rpb(a, b) < 100) == (b < a)


def test_winsorize_caps_at_nearest_rank():
    vals = list(range(1, 101))
    out = em.winsorize(vals, 0.95)
    assert out[:95] == vals[:95]
    assert out[95:] == [95] * 5
    assert em.winsorize([3.0, None, 1.0], 0.5) == [1.0, None, 1.0]


def test_winsorize_by_group():
    vals = [1, 2, 100, 10, 20, 30]
    groups = ["a", "a", "a", "b", "b", "b"]
    assert em.winsorize(vals, 2 / 3, groups) == [1, 2, 2, 10, 20, 20]
    with pytest.raises(ValueError):
        em.winsorize(vals, 0.9, groups[:2])


def test_nearest_rank():
    assert em.nearest_rank([5, 1, 3], 1.0) == 5
    assert em.nearest_rank([5, 1, 3], 0.34) == 3
    assert em.nearest_rank(list(range(1, 11)), 0.9) == 9
    with pytest.raises(ValueError):
        em.nearest_rank([], 0.5)


def test_deciles():
    assert em.assign_deciles(list(range(20))) == [d for d in range(1, 11) for _ in range(2)]
    # ties are broken by input order, so every decile still gets two members
    assert em.assign_deciles([0.0] * 20) == [d for d in range(1, 11) for _ in range(2)]
    shuffled = [7, 3, 9, 0, 1, 8, 2, 6, 5, 4]
    assert em.assign_deciles(shuffled) == [v + 1 for v in shuffled]
    with pytest.raises(ValueError, match="at least 10"):
        em.assign_deciles(list(range(9)))


def test_deciles_within_funnel():
    lifts = list(range(10)) + list(range(100, 110))
    funnels = ["upper"] * 10 + ["lower"] * 10
    assert em.assign_deciles(lifts, funnels) == list(range(1, 11)) * 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=10, max_size=200))
def test_decile_sizes_balanced(lifts):
    d = np.array(em.assign_deciles(lifts))
    sizes = np.bincount(d, minlength=11)[1:]
    assert sizes.max() - sizes.min() <= 1
    order = np.argsort(lifts, kind="stable")
    assert (np.diff(d[order]) >= 0).all()


def rct(lift, se, eid="e", sig=False):
    return {"experiment_id": eid, "event": "purchase", "lift": lift, "lift_se": se, "significant_5pct": sig}


def est(lift, se):
    return {"lift": lift, "lift_se": se}


def test_build_record():
    rec = em.build_record(rct(0.2, 0.02), {"exposed_unexposed": est(0.6, 0.05), "dml": est(0.2, 0.03)},
                          {"n_test": 10}, "lower")
    assert rec.ape == {"exposed_unexposed": pytest.approx(2.0), "dml": 0.0}
    assert rec.rpb == {"dml": 0.0}
    assert rec.method_diff_significant == {"exposed_unexposed": True, "dml": False}
    assert em.EvaluationRecord.from_dict(rec.to_dict()) == rec
    undefined = em.build_record(rct(None, None), {"dml": est(0.2, 0.03)}, {}, "lower")
    assert undefined.ape["dml"] is None and undefined.method_diff_significant["dml"] is None


def test_significance_table_counts():
    same = em.build_record(rct(0.2, 0.02), {"spsm": est(0.2, 0.02)}, {}, "upper")
    far = em.build_record(rct(0.2, 0.01), {"spsm": est(0.2 + 10 * np.hypot(0.01, 0.01), 0.01)}, {}, "mid")
    table = em.significance_table([same, far], methods=("spsm",))
    rows = {(r["funnel"], r["rct_p"]): r["spsm"] for r in table["rows"]}
    assert rows[("all", ">0.05")] == {"p>0.05": 1, "p<=0.05": 1, "pct_significant": 0.5}
    assert rows[("upper", ">0.05")]["p>0.05"] == 1
    assert rows[("mid", ">0.05")]["p<=0.05"] == 1
    assert rows[("lower", "<=0.05")]["pct_significant"] is None
    text = em.render_significance_table(table)
    assert "50%" in text and len(text.splitlines()) == 1 + len(table["rows"])


def test_unbiased_methods_rarely_differ():
    g = np.random.default_rng(0)
    recs = []
    for i in range(800):
        truth = g.uniform(0.05, 0.5)
        se_r, se_m = g.uniform(0.01, 0.05, 2)
        recs.append(em.build_record(rct(truth + se_r * g.standard_normal(), se_r, str(i)),
                                    {"dml": est(truth + se_m * g.standard_normal(), se_m)}, {}, "lower"))
    share = np.mean([r.method_diff_significant["dml"] for r in recs])
    assert abs(share - 0.05) < 3 * np.sqrt(0.05 * 0.95 / 800)


def test_share_improved_matches_rpb():
    recs = [
        em.build_record(rct(0.2, 0.02), {"exposed_unexposed": est(eu, 0.05), "dml": est(m, 0.05)}, {}, "upper")
        for eu, m in ((0.6, 0.3), (0.6, 0.7), (0.3, 0.25), (0.1, 0.4))
    ]
    assert em.share_improved(recs, "dml") == 0.5
    table = em.rpb_table(recs, methods=("dml",))
    assert table["all"]["dml"]["share_improved"] == 0.5
    assert table["all"]["dml"]["n"] == 4 and table["mid"]["dml"] is None
    assert em.share_improved([], "dml") is None


def test_decile_table_and_render():
    recs = []
    for i in range(10):
        r = em.build_record(rct(0.1 * (i + 1), 0.01, str(i)), {"spsm": est(0.1 * (i + 1) + 0.01 * i, 0.01)},
                            {}, "upper")
        recs.append(r)
    for r, d in zip(recs, em.assign_deciles([r.rct_lift for r in recs])):
        r.decile = d
    table = em.decile_table(recs, "ae", methods=("spsm",))
    assert set(table) == {"upper"}
    assert table["upper"]["1"]["spsm"] == 0.0
    assert table["upper"]["10"]["spsm"] == pytest.approx(0.09)
    assert table["upper"]["median"]["spsm"] == pytest.approx(0.045)
    text = em.render_decile_table(table, methods=("spsm",), pct=False)
    assert text.splitlines()[0].split() == ["decile", "upper:spsm"]
    assert len(text.splitlines()) == 12


def test_two_sided_p():
    assert em.two_sided_p(1.96, 1.0) == pytest.approx(0.05, abs=1e-3)
    assert em.two_sided_p(0.0, 0.0) == 1.0 and em.two_sided_p(0.1, 0.0) == 0.0
    assert em.difference_pvalue(0.3, 0.1, 0.3, 0.2) == 1.0
