from __future__ import annotations

import numpy as np
import pytest

from admeasure.data import ExperimentDataset, ExperimentMeta, FeatureSchema, OutcomeEvent

# filled by tests/test_acceptance.py, printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_dataset(z, w, y, dense=None, event="purchase", sparse=None, action_rate=None, prior=None, ids=None,
                 vocab=5, experiment_id="t"):
    """Small dataset from plain arrays; features default to zeros."""
    z = np.asarray(z)
    n = z.size
    dense = np.zeros((n, 1)) if dense is None else np.asarray(dense, dtype=float)
    sparse = [[] for _ in range(n)] if sparse is None else sparse
    indptr = np.concatenate([[0], np.cumsum([len(s) for s in sparse])])
    indices = np.array([i for s in sparse for i in s], dtype=np.int64)
    meta = ExperimentMeta(experiment_id, (OutcomeEvent(event, "lower"),), 0.5)
    schema = FeatureSchema(tuple(f"x{j}" for j in range(dense.shape[1])), vocab)
    return ExperimentDataset(
        meta, schema,
        ids if ids is not None else [f"u{i}" for i in range(n)],
        z, w, {event: y}, dense, indptr, indices,
        np.full(n, 0.5) if action_rate is None else action_rate,
        np.zeros(n, dtype=int) if prior is None else prior,
    )


def random_test_group(rng: np.random.Generator, n: int, p_w=None, p_y=None, d: int = 2):
    """Test-group-only dataset with random exposure and outcomes (both classes guaranteed)."""
    p_w = rng.uniform(0.1, 0.9) if p_w is None else p_w
    p_y = rng.uniform(0.05, 0.5) if p_y is None else p_y
    w = (rng.random(n) < p_w).astype(int)
    w[:2] = [0, 1]
    y = (rng.random(n) < p_y).astype(int)
    return make_dataset(np.ones(n, dtype=int), w, y, dense=rng.standard_normal((n, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
