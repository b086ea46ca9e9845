import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ucbroute.data import Sample, generate_synthetic, normalize_cost
from ucbroute.reward import FeedbackOracle, RewardParams, reward_matrix, reward_table, utility_reward

unit = st.floats(0, 1, allow_nan=False)
lam = st.floats(0, 10, allow_nan=False)


def test_closed_forms():
    assert utility_reward(0.8, 0.0, RewardParams(1.0)) == 0.8
    assert utility_reward(0.37, 0.9, RewardParams(0.0)) == 0.37
    assert abs(utility_reward(1.0, 1.0, RewardParams(1.0)) - 0.367879441171442) < 1e-12


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        RewardParams(-0.1)


def _sample(q, c):
    K = len(q)
    return Sample("x", 0, np.zeros(2), np.zeros(3), np.asarray(q, float), np.asarray(c, float))


def test_reward_table():
    np.testing.assert_allclose(
        reward_table(_sample([1, 1], [0, 4.0]), 4.0, RewardParams(1.0)), [1.0, math.exp(-1)], rtol=0, atol=1e-15
    )
    assert np.all(reward_table(_sample([0, 0, 0], [1, 2, 3]), 3.0, RewardParams(1.0)) == 0)
    q = [0.1, 0.5, 0.7]
    np.testing.assert_array_equal(reward_table(_sample(q, [1, 2, 3]), 3.0, RewardParams(0.0)), q)


def test_reward_matrix_matches_table():
    ds = generate_synthetic(0, 50, 4, 3, 3)
    rp = RewardParams(0.7)
    M = reward_matrix(ds, rp)
    T = np.array([reward_table(s, ds.header.cmax, rp) for s in ds])
    np.testing.assert_allclose(M, T, rtol=0, atol=1e-15)


@given(unit, unit, unit, lam)
def test_monotone_in_cost(q, c1, c2, lmb):
    c1, c2 = sorted((c1, c2))
    p = RewardParams(lmb)
    assert utility_reward(q, c1, p) >= utility_reward(q, c2, p)


@given(unit, unit, unit, lam)
def test_monotone_in_quality(q1, q2, c, lmb):
    q1, q2 = sorted((q1, q2))
    p = RewardParams(lmb)
    assert utility_reward(q1, c, p) <= utility_reward(q2, c, p)


@given(unit, unit, lam)
def test_bounds_and_scaling(q, c, lmb):
    p = RewardParams(lmb)
    r = utility_reward(q, c, p)
    assert 0.0 <= r <= q <= 1.0
    assert r == pytest.approx(q * utility_reward(1.0, c, p), rel=1e-15, abs=0)


def test_oracle_counts():
    ds = generate_synthetic(0, 10, 3, 2, 3)
    o = FeedbackOracle(ds, RewardParams())
    fb = o.reveal(4, 2)
    assert fb.reward == utility_reward(ds.quality[4, 2], normalize_cost(ds.cost[4, 2], ds.header.cmax), o.params)
    assert (o.reveals, o.full_reads, o.unchosen_reads, o.decision_reads) == (1, 0, 0, 0)
    o.in_decision = True
    o.full_rewards(3)
    assert (o.full_reads, o.unchosen_reads, o.decision_reads) == (1, 2, 1)
