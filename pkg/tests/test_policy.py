import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucbroute import policy
from ucbroute.data import RoutingContext
from ucbroute.policy import (
    UcbState,
    UcbStateError,
    augment_feature,
    buffer_features,
    decide,
    rank1_update,
    rebuild,
    ucb_score,
)
from ucbroute.replay import ReplayBuffer
from ucbroute.utilitynet import init_params, score_actions

from conftest import make_records


def test_augment_feature():
    np.testing.assert_array_equal(augment_feature([2.0, 3.0]), [2.0, 3.0, 1.0])
    out = augment_feature(np.zeros((4, 128)))
    assert out.shape == (4, 129) and np.all(out[:, -1] == 1.0)


def test_ucb_score_examples():
    s = UcbState.initial(dim=4, beta=0.0)
    assert ucb_score(0.3, np.ones(4), s) == (0.3, 0.0)
    s = UcbState.initial(dim=4, beta=1.0)
    assert ucb_score(0.5, np.array([1.0, 0, 0, 0]), s) == (1.5, 1.0)


def test_bonus_after_one_update():
    s = UcbState.initial(dim=3)
    g = np.array([1.0, 0, 0])
    rank1_update(s, g)
    assert ucb_score(0.0, g, s)[1] == pytest.approx(1 / np.sqrt(2), abs=1e-15)


def test_rank1_examples():
    s = UcbState.initial(dim=5)
    rank1_update(s, np.zeros(5))
    np.testing.assert_array_equal(s.A_inv, np.eye(5))
    rank1_update(s, np.eye(5)[0])
    np.testing.assert_allclose(s.A_inv, np.diag([0.5, 1, 1, 1, 1]), rtol=0, atol=1e-15)
    assert s.update_count == 2


def test_initial_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        UcbState.initial(lambda0=0.0)
    with pytest.raises(ValueError):
        UcbState.initial(beta=-1.0)


def test_sherman_morrison_vs_direct_inverse():
    rng = np.random.default_rng(0)
    H, lam = 16, 0.7
    s = UcbState.initial(dim=H, lambda0=lam)
    A = lam * np.eye(H)
    for _ in range(100):
        g = rng.normal(size=H)
        rank1_update(s, g)
        A += np.outer(g, g)
    assert np.max(np.abs(s.A_inv - np.linalg.inv(A))) < 1e-8
    assert np.max(np.abs(s.A_inv - s.A_inv.T)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_bonus_strictly_decreases(seed, H):
    rng = np.random.default_rng(seed)
    s = UcbState.initial(dim=H)
    g = rng.normal(size=H) + 0.1
    prev = ucb_score(0.0, g, s)[1]
    for _ in range(5):
        rank1_update(s, g)
        cur = ucb_score(0.0, g, s)[1]
        assert cur < prev
        prev = cur


def test_corruption_detected():
    s = UcbState.initial(dim=3)
    with pytest.raises(UcbStateError):
        rank1_update(s, np.array([np.nan, 0, 0]))
    s.A_inv = -np.eye(3)
    with pytest.raises(UcbStateError):
        ucb_score(0.0, np.ones(3), s)
    with pytest.raises(UcbStateError):
        rank1_update(s, np.ones(3))


def _stub(monkeypatch, gate):
    # two actions, mu = [0.5, 0.4]; A_inv crafted so bonuses are [0, 0.2]
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    monkeypatch.setattr(policy, "score_actions", lambda p, c: (np.array([0.5, 0.4]), h, gate))
    state = UcbState(np.diag([0.0, 0.04, 0.0]), beta=1.0, tau_g=0.5)
    return state, RoutingContext(np.zeros(2), np.zeros(3), 0)


def test_decide_gate_open_takes_ucb(monkeypatch):
    state, ctx = _stub(monkeypatch, 0.7)
    d = decide(None, state, ctx)
    np.testing.assert_allclose(d.bonus_scores, [0.0, 0.2], atol=1e-15)
    assert d.chosen_action == 1 and d.safe_action == 0 and d.used_ucb


def test_decide_gate_closed_takes_safe(monkeypatch):
    state, ctx = _stub(monkeypatch, 0.3)
    d = decide(None, state, ctx)
    assert d.chosen_action == 0 and not d.used_ucb


def test_decide_tie_breaks_low(monkeypatch):
    h = np.zeros((3, 2))
    monkeypatch.setattr(policy, "score_actions", lambda p, c: (np.array([0.2, 0.2, 0.2]), h, 0.9))
    d = decide(None, UcbState.initial(dim=3), RoutingContext(np.zeros(2), np.zeros(3), 0))
    assert d.chosen_action == 0


def test_decide_threshold_extremes(tiny_ds):
    p = init_params(6, 3, 3, seed=1)
    for i in range(10):
        ctx = tiny_ds.context(i)
        mu, _, _ = score_actions(p, ctx)
        # tau above 1: never open, always the safe action
        d = decide(p, UcbState.initial(tau_g=1.01, beta=5.0), ctx)
        assert not d.used_ucb and d.chosen_action == int(np.argmax(mu))
        # tau 0: always open
        d = decide(p, UcbState.initial(tau_g=0.0, beta=5.0), ctx)
        assert d.used_ucb and d.chosen_action == int(np.argmax(d.ucb_scores))
        np.testing.assert_allclose(d.ucb_scores, d.mu_scores + d.bonus_scores, rtol=0, atol=1e-15)


def test_decide_gating_dichotomy(tiny_ds):
    p = init_params(6, 3, 3, seed=2)
    state = UcbState.initial(beta=1.0)
    for i in range(len(tiny_ds)):
        d = decide(p, state, tiny_ds.context(i))
        assert d.used_ucb == (d.gate_prob >= state.tau_g)
        assert d.chosen_action == (int(np.argmax(d.ucb_scores)) if d.used_ucb else d.safe_action)


def test_rebuild_empty_buffer():
    s = UcbState.initial(lambda0=2.0)
    rank1_update(s, np.ones(129))
    rebuild(s, init_params(6, 3, 3), ReplayBuffer())
    np.testing.assert_allclose(s.A_inv, np.eye(129) / 2.0, rtol=0, atol=1e-15)
    assert s.update_count == 0


def test_rebuild_matches_sequential_updates(tiny_ds):
    p = init_params(6, 3, 3, seed=3)
    buf = ReplayBuffer()
    for r in make_records(tiny_ds, 30, seed=4):
        buf.append(r)
    G = buffer_features(p, buf)
    seq = UcbState.initial(lambda0=1.5)
    for g in G:
        rank1_update(seq, g)
    reb = rebuild(UcbState.initial(lambda0=1.5), p, buf)
    assert np.max(np.abs(seq.A_inv - reb.A_inv)) < 1e-8
    assert reb.update_count == 30


def test_rebuild_single_record_bonus(tiny_ds):
    # zero network: h_last = 0, so g = e_last and the bonus halves in variance
    from ucbroute.utilitynet import zeros_like_params

    z = zeros_like_params(init_params(6, 3, 3))
    buf = ReplayBuffer()
    buf.append(make_records(tiny_ds, 1)[0])
    s = rebuild(UcbState.initial(beta=0.8), z, buf)
    g = np.zeros(129)
    g[-1] = 1.0
    assert ucb_score(0.0, g, s)[1] == pytest.approx(0.8 / np.sqrt(2), abs=1e-15)
