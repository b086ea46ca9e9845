import dataclasses

import numpy as np
import pytest

from ucbroute.data import Dataset, generate_synthetic, normalize_cost
from ucbroute.harness import (
    PolicySpec,
    ProtocolConfig,
    ProtocolError,
    ReplaySimulator,
    TrainConfig,
    compare_runs,
    compute_slice_metrics,
    read_metrics_csv,
    run_protocol,
    slice_bounds,
    write_decisions_csv,
    write_domain_csv,
    write_metrics_csv,
)
from ucbroute.replay import ReplayRecord
from ucbroute.reward import RewardParams, reward_matrix, utility_reward
from ucbroute.utilitynet import load_checkpoint, save_checkpoint

SMALL = ProtocolConfig(num_slices=3, replay_epochs=2, seed=4)
FAST = TrainConfig(batch_size=16)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(3, 120, 3, 2, 6)


@pytest.fixture(scope="module")
def neural_run(small_ds):
    return run_protocol(small_ds, PolicySpec("neural_ucb"), SMALL, train=FAST)


def test_slice_bounds_partition():
    for n, k in [(10, 3), (2000, 10), (7, 7), (36497, 20)]:
        b = slice_bounds(n, k)
        assert b[0][0] == 0 and b[-1][1] == n and len(b) == k
        assert all(hi == lo2 for (_, hi), (lo2, _) in zip(b, b[1:]))
        sizes = [hi - lo for lo, hi in b]
        assert max(sizes) - min(sizes) <= 1
    with pytest.raises(ValueError):
        slice_bounds(3, 4)


def test_single_slice_run():
    ds = generate_synthetic(0, 100, 3, 2, 4)
    sim = ReplaySimulator(ds, PolicySpec("neural_ucb"), ProtocolConfig(1, 1), train=FAST)
    res = sim.run()
    assert len(res.decisions) == 100 and len(sim.buffer) == 100
    assert len(sim.train_losses) == 1 and len(sim.train_losses[0]) == 1
    assert sim.ucb.update_count == 100  # rebuilt over the whole buffer


def test_slice_records_and_buffer(neural_run, small_ds):
    sim = neural_run.simulator
    assert [m.slice_index for m in neural_run.metrics] == [1, 2, 3]
    assert len(sim.buffer) == len(small_ds)
    assert [r.slice_index for r in sim.buffer][::40] == [1, 2, 3]
    assert len(sim.train_losses) == 3


def test_warm_start_slice_is_uniform_random(small_ds):
    a = run_protocol(small_ds, PolicySpec("neural_ucb"), dataclasses.replace(SMALL, num_slices=2), train=FAST)
    b = run_protocol(small_ds, PolicySpec("neural_ucb", beta=9.0), dataclasses.replace(SMALL, num_slices=2), train=FAST)
    # slice-1 actions come from the warm-start stream, not the policy
    first = [d.action for d in a.decisions if d.slice_index == 1]
    assert first == [d.action for d in b.decisions if d.slice_index == 1]
    assert len(set(first)) == 3


def test_max_quality_matches_per_sample_max(small_ds):
    res = run_protocol(small_ds, PolicySpec("max_quality"), SMALL)
    for m, (lo, hi) in zip(res.metrics, slice_bounds(len(small_ds), 3)):
        assert m.avg_selected_quality == pytest.approx(small_ds.quality[lo:hi].max(1).mean(), abs=1e-12)
    res = run_protocol(small_ds, PolicySpec("min_cost"), SMALL)
    for m, (lo, hi) in zip(res.metrics, slice_bounds(len(small_ds), 3)):
        assert m.avg_cost == pytest.approx(small_ds.cost[lo:hi].min(1).mean(), abs=1e-12)


def _recs(ds, idx, actions, rp):
    out = []
    for i, a in zip(idx, actions):
        s = ds[i]
        r = utility_reward(s.quality[a], normalize_cost(s.cost[a], ds.header.cmax), rp)
        out.append(ReplayRecord(s.context, a, r, 0))
    return out


def test_metrics_examples(small_ds):
    rp = RewardParams()
    s = small_ds[0]
    m = compute_slice_metrics(_recs(small_ds, [0], [2], rp), [s], small_ds.header.cmax, rp, prior_cum=1.0)
    np.testing.assert_array_equal(m.action_rate, [0, 0, 1])
    assert m.cum_reward == 1.0 + m.avg_reward
    assert m.per_domain_count == {s.domain_id: 1}
    # a record whose reward disagrees with its sample
    bad = [dataclasses.replace(r, reward=0.5) for r in _recs(small_ds, [0, 1], [0, 0], rp)]
    with pytest.raises(ProtocolError, match="does not match"):
        compute_slice_metrics(bad, [small_ds[0], small_ds[1]], small_ds.header.cmax, rp)
    with pytest.raises(ProtocolError):
        compute_slice_metrics(_recs(small_ds, [0], [0], rp), [small_ds[0], small_ds[1]], small_ds.header.cmax, rp)


def test_metrics_constant_reward():
    ds = generate_synthetic(0, 10, 2, 1, 3)
    ds = dataclasses.replace(ds, quality=np.full_like(ds.quality, 0.5), cost=np.zeros_like(ds.cost))
    ds.cost[0, 0] = 1.0  # keeps CMAX consistent
    ds = Dataset(dataclasses.replace(ds.header, cmax=1.0), ds.ids, ds.domain_ids, ds.embeddings, ds.features,
                 ds.quality, ds.cost)
    rp = RewardParams(0.0)
    m = compute_slice_metrics(_recs(ds, range(10), [1] * 10, rp), list(ds), 1.0, rp)
    assert m.avg_reward == 0.5 and m.cum_reward == 5.0


def test_metrics_recomputed_independently(neural_run, small_ds):
    R = reward_matrix(small_ds, RewardParams())
    acts = np.array([d.action for d in neural_run.decisions])
    chosen = R[np.arange(len(small_ds)), acts]
    cum = 0.0
    for m, (lo, hi) in zip(neural_run.metrics, slice_bounds(len(small_ds), 3)):
        assert abs(m.avg_reward - chosen[lo:hi].mean()) < 1e-12
        assert abs(m.avg_cost - small_ds.cost[np.arange(lo, hi), acts[lo:hi]].mean()) < 1e-12
        cum += chosen[lo:hi].sum()
        assert abs(m.cum_reward - cum) < 1e-12


def test_cum_reward_monotone(neural_run):
    cum = [m.cum_reward for m in neural_run.metrics]
    assert all(b >= a for a, b in zip(cum, cum[1:]))


@pytest.mark.parametrize("kind", ["neural_ucb", "random", "binary_router"])
def test_no_unchosen_reads_while_deciding(small_ds, kind):
    res = run_protocol(small_ds, PolicySpec(kind), SMALL, train=FAST)
    o = res.oracle
    assert o.decision_reads == 0
    assert o.reveals == len(small_ds)
    if kind != "binary_router":
        assert o.full_reads == 0 and o.unchosen_reads == 0


def test_oracle_baselines_are_counted(small_ds):
    o = run_protocol(small_ds, PolicySpec("min_cost"), SMALL).oracle
    assert o.decision_reads == len(small_ds)


def test_counterfactual_outcomes_do_not_matter(neural_run, small_ds):
    """Scrambling every unchosen (quality, cost) leaves the run unchanged."""
    acts = np.array([d.action for d in neural_run.decisions])
    rng = np.random.default_rng(0)
    q, c = small_ds.quality.copy(), small_ds.cost.copy()
    mask = np.ones_like(q, dtype=bool)
    mask[np.arange(len(acts)), acts] = False
    q[mask] = rng.random(mask.sum())
    c[mask] = rng.random(mask.sum()) * small_ds.header.cmax
    other = Dataset(small_ds.header, small_ds.ids, small_ds.domain_ids, small_ds.embeddings,
                    small_ds.features, q, c)
    res = run_protocol(other, PolicySpec("neural_ucb"), SMALL, train=FAST)
    assert [d.action for d in res.decisions] == acts.tolist()
    assert [m.avg_reward for m in res.metrics] == [m.avg_reward for m in neural_run.metrics]


def test_replay_consistency(neural_run, small_ds):
    R = reward_matrix(small_ds, RewardParams())
    for i, (d, rec) in enumerate(zip(neural_run.decisions, neural_run.simulator.buffer)):
        assert d.reward == rec.reward
        assert abs(rec.reward - R[i, rec.action]) < 1e-12


def _write_all(res, out):
    out.mkdir()
    write_metrics_csv(res.metrics, out / "metrics.csv")
    write_domain_csv(res.metrics, out / "domains.csv")
    write_decisions_csv(res.decisions, out / "decisions.csv")


def test_byte_identical_reruns(neural_run, small_ds, tmp_path):
    again = run_protocol(small_ds, PolicySpec("neural_ucb"), SMALL, train=FAST)
    _write_all(neural_run, tmp_path / "a")
    _write_all(again, tmp_path / "b")
    for f in ("metrics.csv", "domains.csv", "decisions.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    other = run_protocol(small_ds, PolicySpec("neural_ucb"), dataclasses.replace(SMALL, seed=5), train=FAST)
    _write_all(other, tmp_path / "c")
    assert (tmp_path / "a/decisions.csv").read_bytes() != (tmp_path / "c/decisions.csv").read_bytes()


def test_metrics_csv_round_trip(neural_run, tmp_path):
    p = tmp_path / "m.csv"
    write_metrics_csv(neural_run.metrics, p)
    rows = read_metrics_csv(p)
    assert [r["avg_reward"] for r in rows] == [m.avg_reward for m in neural_run.metrics]


def test_checkpoint_resume(small_ds, tmp_path):
    proto = dataclasses.replace(SMALL, num_slices=2)
    full = run_protocol(small_ds, PolicySpec("neural_ucb"), proto, train=FAST)

    first = ReplaySimulator(small_ds, PolicySpec("neural_ucb"), proto, train=FAST)
    first.run_slice(0)
    save_checkpoint(first.params, first.opt, tmp_path / "ck.npz")
    params, opt = load_checkpoint(tmp_path / "ck.npz")

    resumed = ReplaySimulator(small_ds, PolicySpec("neural_ucb"), proto, train=FAST)
    resumed.restore(params, opt, list(first.buffer), 1, first.cum_reward)
    np.testing.assert_array_equal(resumed.ucb.A_inv, first.ucb.A_inv)
    res = resumed.run()
    want = [d for d in full.decisions if d.slice_index == 2]
    assert res.decisions == want
    assert res.metrics[-1].cum_reward == full.metrics[-1].cum_reward


def test_compare_runs(neural_run, small_ds, tmp_path):
    rnd = run_protocol(small_ds, PolicySpec("random"), SMALL)
    for name, res in [("neural", neural_run), ("random", rnd)]:
        (tmp_path / name).mkdir()
        write_metrics_csv(res.metrics, tmp_path / name / "metrics.csv")
    cmp = compare_runs([tmp_path / "neural/metrics.csv", tmp_path / "random/metrics.csv"])
    assert cmp.runs == ["neural", "random"] and cmp.slices == [1, 2, 3]
    np.testing.assert_array_equal(cmp.diffs["neural"]["avg_reward"], 0.0)
    np.testing.assert_allclose(
        cmp.diffs["random"]["avg_reward"],
        [b.avg_reward - a.avg_reward for a, b in zip(neural_run.metrics, rnd.metrics)], rtol=0, atol=1e-15,
    )
    assert cmp.final()["random"]["avg_reward"] == rnd.metrics[-1].avg_reward
    # self-comparison
    same = compare_runs([tmp_path / "neural/metrics.csv"] * 2)
    for d in same.diffs.values():
        assert all(np.all(v == 0) for v in d.values())


def test_compare_misaligned(neural_run, small_ds, tmp_path):
    two = run_protocol(small_ds, PolicySpec("random"), dataclasses.replace(SMALL, num_slices=2))
    write_metrics_csv(neural_run.metrics, tmp_path / "a.csv")
    write_metrics_csv(two.metrics, tmp_path / "b.csv")
    with pytest.raises(ProtocolError, match="align"):
        compare_runs([tmp_path / "a.csv", tmp_path / "b.csv"])


def test_config_validation():
    with pytest.raises(ValueError):
        PolicySpec("greedy")
    with pytest.raises(ValueError):
        ProtocolConfig(num_slices=0)
    with pytest.raises(ValueError):
        ProtocolConfig(warmstart="sometimes")


@pytest.mark.parametrize("kind", ["neural_ucb", "random", "min_cost", "max_quality", "binary_router"])
def test_single_arm(kind):
    ds = generate_synthetic(0, 30, 1, 2, 4)
    res = run_protocol(ds, PolicySpec(kind), ProtocolConfig(2, 1), train=FAST)
    assert all(m.action_rate.tolist() == [1.0] for m in res.metrics)
