import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meme.replay import (
    Handle, Replay, ReplayConfig, ReplayError, ReplayShard, SequenceBuilder, TrajectorySequence,
    actor_permit, collate, importance_weights, spi_permit)

OBS, AP, H = 3, 2, 4


def step(t, done=False):
    return dict(obs=np.full(OBS, t, np.float32), next_obs=np.full(OBS, t + 1, np.float32),
                prev_action=0, scalars=np.zeros(4, np.float32), ap=np.zeros(AP, np.float32),
                action=1, mu=0.5, r_e=float(t), r_i=0.0, done=done, state=np.full(H, t, np.float32))


def episode(length, trace_length=16, period=8, ep=0):
    b = SequenceBuilder(trace_length, period, OBS, AP)
    b.begin(mixture=2, episode=ep)
    out = []
    for t in range(length):
        out += b.add(**step(t, done=t == length - 1))
    return out + b.finish()


def seq(tag=0):
    return episode(4, trace_length=4, period=4, ep=tag)[0]


# -- sequence building ---------------------------------------------------------------

def test_window_starts_and_padding():
    seqs = episode(40)
    assert [s.start for s in seqs] == [0, 8, 16, 24, 32]
    last = seqs[-1]
    assert last.valid.sum() == 8 and not last.valid[8:].any()
    assert last.done[7] and not last.done[8:].any()
    assert np.all(last.mu[8:] == 1.0)
    assert np.all(last.steps[8:] == -1)


def test_short_episode_single_padded_window():
    seqs = episode(5)
    assert len(seqs) == 1 and seqs[0].valid.sum() == 5


def test_windows_carry_their_initial_state():
    seqs = episode(40)
    for s in seqs:
        assert np.all(s.init_state == s.start)
        np.testing.assert_array_equal(s.r_e[s.valid], np.arange(s.start, s.start + s.valid.sum()))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(2, 20), st.integers(1, 20))
def test_windows_never_cross_episodes(length, trace_length, period):
    period = min(period, trace_length)
    seqs = episode(length, trace_length, period)
    covered = set()
    for s in seqs:
        s.validate()
        idx = s.steps[s.valid]
        assert np.all(np.diff(idx) == 1)
        assert idx[0] >= 0 and idx[-1] < length
        covered.update(idx.tolist())
    assert covered == set(range(length))


def test_malformed_sequence_rejected():
    s = seq()
    s.valid = np.array([True, False, True, True])
    with pytest.raises(ReplayError):
        s.validate()
    s = seq()
    s.mu = np.zeros(4)
    with pytest.raises(ReplayError):
        s.validate()
    s = seq()
    s.obs = s.obs[:3]
    with pytest.raises(ReplayError):
        ReplayShard(4).insert(s)


def test_collate_is_time_major():
    b = collate([seq(0), seq(1), seq(2)])
    assert b["obs"].shape == (4, 3, OBS)
    assert b["init_state"].shape == (3, H)
    assert b["mixture"].tolist() == [2, 2, 2]


# -- shards ---------------------------------------------------------------------------

def test_single_item_sampled_with_probability_one():
    r = Replay(ReplayConfig(shards=1, capacity=8))
    r.insert(seq(7))
    seqs, w, handles, probs = r.sample(5, np.random.default_rng(0))
    assert all(s.episode == 7 for s in seqs)
    assert np.all(probs == 1.0) and np.all(w == 1.0)


def test_fifo_eviction():
    sh = ReplayShard(2)
    for i in range(3):
        sh.insert(seq(i))
    assert sorted(s.episode for s in sh.items) == [1, 2]
    assert sh.inserted == 3


def test_new_items_get_max_priority():
    sh = ReplayShard(4)
    sh.insert(seq(0), priority=5.0)
    sh.insert(seq(1))
    assert sh.priorities[1] == 5.0


def test_priority_exponent_monte_carlo():
    r = Replay(ReplayConfig(shards=1, capacity=4, priority_exponent=0.6))
    r.insert(seq(0))
    r.insert(seq(1))
    sh = r.shards[0]
    sh.priorities[:2] = [8.0, 1.0]
    seqs, _, _, _ = r.sample(100_000, np.random.default_rng(0))
    n0 = sum(s.episode == 0 for s in seqs)
    ratio = n0 / (100_000 - n0)
    assert ratio == pytest.approx(8 ** 0.6, rel=0.02)


def test_shards_weighted_by_size():
    r = Replay(ReplayConfig(shards=2, capacity=16))
    for i in range(3):
        r.insert(seq(i), shard=0)
    r.insert(seq(9), shard=1)
    seqs, _, _, probs = r.sample(40_000, np.random.default_rng(1))
    frac = np.mean([s.episode == 9 for s in seqs])
    assert frac == pytest.approx(0.25, abs=0.01)
    np.testing.assert_allclose(probs, 0.25)


def test_importance_weight_examples():
    np.testing.assert_allclose(importance_weights([0.8, 0.2], 2, 0.4), [0.574, 1.0], atol=1e-3)
    np.testing.assert_array_equal(importance_weights([0.25] * 4, 4, 0.4), 1.0)
    np.testing.assert_array_equal(importance_weights([0.7, 0.3], 2, 0.0), 1.0)


def test_update_then_resample_follows_new_priorities():
    r = Replay(ReplayConfig(shards=1, capacity=8))
    for i in range(2):
        r.insert(seq(i))
    handles = [Handle(0, i, int(r.shards[0].uids[i])) for i in range(2)]
    r.update_priorities(handles, [1e-9, 1.0])
    seqs, _, _, _ = r.sample(2000, np.random.default_rng(2))
    assert np.mean([s.episode == 0 for s in seqs]) < 0.01
    r.update_priorities(handles, [1.0, 1.0])
    seqs, _, _, _ = r.sample(20_000, np.random.default_rng(3))
    assert np.mean([s.episode == 0 for s in seqs]) == pytest.approx(0.5, abs=0.015)


def test_stale_handles_are_ignored():
    sh_replay = Replay(ReplayConfig(shards=1, capacity=2))
    sh_replay.insert(seq(0))
    _, _, handles, _ = sh_replay.sample(1, np.random.default_rng(0))
    sh_replay.insert(seq(1))
    sh_replay.insert(seq(2))  # evicts the sampled item
    before = sh_replay.shards[0].priorities.copy()
    assert sh_replay.update_priorities(handles, [123.0]) == 0
    np.testing.assert_array_equal(sh_replay.shards[0].priorities, before)


def test_empty_replay_raises():
    with pytest.raises(ReplayError):
        Replay(ReplayConfig()).sample(1, np.random.default_rng(0))


# -- flow control ---------------------------------------------------------------------

def test_spi_gate_examples():
    assert not spi_permit(0, 0, 6.0, 64)
    assert spi_permit(100, 0, 6.0, 64)
    assert spi_permit(100, 536, 6.0, 64)
    assert not spi_permit(100, 537, 6.0, 64)


@given(st.integers(1, 10_000), st.floats(0.5, 20), st.integers(1, 128))
def test_gate_never_exceeds_target(inserts, spi, batch):
    samples = 0
    while spi_permit(inserts, samples, spi, batch):
        samples += batch
    assert samples / inserts <= spi
    assert (samples + batch) / inserts > spi


def test_actor_permit_slack():
    assert actor_permit(10, 60, 6.0, 0)
    assert not actor_permit(11, 0, 6.0, 30)
    assert actor_permit(11, 40, 6.0, 30)
