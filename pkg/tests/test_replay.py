"""Tests for segments, the sum tree and prioritized replay."""

import numpy as np
import pytest

from effzero.replay import EpisodeRecorder, GameSegment, ReplayBuffer, SumTree


def _segment(owned, stored=None, terminal=True, collection_step=0, with_states=False):
    stored = owned if stored is None else stored
    return GameSegment(
        observations=np.zeros((stored + 1, 1, 2, 2), dtype=np.float32),
        actions=np.zeros(stored, dtype=np.int64),
        rewards=np.arange(stored, dtype=np.float64),
        policies=np.full((stored, 2), 0.5),
        root_values=np.zeros(stored),
        collection_steps=np.full(stored, collection_step, dtype=np.int64),
        owned=owned,
        terminal=terminal,
        env_states=[(i, 0, False) for i in range(stored + 1)] if with_states else None,
    )


def _record_stream(recorder, count, start_value=0):
    recorder.start(np.full((1, 1, 1), float(start_value)), env_state=(start_value,))
    segments = []
    for i in range(count):
        value = start_value + i + 1
        segments += recorder.record(i % 2, float(i), np.array([0.5, 0.5]), 0.0, i, np.full((1, 1, 1), float(value)), (value,))
    return segments


def test_recorder_cuts_with_overlapping_tail():
    """Test segments own segment_length transitions and carry a pad tail."""
    recorder = EpisodeRecorder(segment_length=3, pad=2)
    segments = _record_stream(recorder, 10)
    segments += recorder.finish()

    assert [s.owned for s in segments] == [3, 3, 3, 1]
    assert [len(s) for s in segments] == [5, 5, 4, 1]
    assert [s.terminal for s in segments] == [False, False, True, True]
    assert segments[1].rewards.tolist() == [3.0, 4.0, 5.0, 6.0, 7.0]
    # observations hold one more entry than actions
    assert segments[1].observations[:, 0, 0, 0].tolist() == [3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    assert segments[1].env_states[0] == (3,)
    for segment in segments:
        segment.validate(segment_length=3)


def test_recorder_flush_is_not_terminal():
    """Test a cut stream keeps its segments non-terminal."""
    recorder = EpisodeRecorder(segment_length=4, pad=1, keep_env_states=False)
    _record_stream(recorder, 2)
    segments = recorder.flush()

    assert len(segments) == 1
    assert not segments[0].terminal
    assert segments[0].env_states is None
    assert recorder.flush() == []


def test_segment_validate_errors():
    """Test malformed segments are rejected with a reason."""
    segment = _segment(3)
    segment.rewards = np.zeros(2)
    with pytest.raises(ValueError, match="rewards length"):
        segment.validate()

    with pytest.raises(ValueError, match="owned"):
        _segment(0, stored=2).validate()

    with pytest.raises(ValueError, match="exceeds segment_length"):
        _segment(4).validate(segment_length=3)

    bad = _segment(2)
    bad.rewards = np.array([0.0, np.nan])
    with pytest.raises(ValueError, match="finite"):
        bad.validate()


def test_sum_tree_find():
    """Test prefix search lands in the right leaf."""
    tree = SumTree(4)
    tree.set(np.arange(4), np.array([1.0, 2.0, 3.0, 4.0]))

    assert tree.total == 10.0
    assert tree.find(np.array([0.5, 1.5, 3.5, 9.99, 0.0])).tolist() == [0, 1, 2, 3, 0]


def test_sum_tree_skips_empty_leaves():
    """Test zero-priority leaves are never returned."""
    tree = SumTree(5)
    tree.set(np.array([1, 3]), np.array([2.0, 2.0]))

    found = tree.find(np.linspace(0.0, 3.999, 50))

    assert set(found.tolist()) == {1, 3}


def test_append_assigns_global_indices_and_max_priority():
    """Test indices grow monotonically and new data gets the max priority."""
    buffer = ReplayBuffer(capacity=20, alpha=1.0)

    assert buffer.append(_segment(3)) == 0
    buffer.update_priorities([0, 1, 2], [4.0, 1.0, 2.0])
    assert buffer.append(_segment(2)) == 3

    assert len(buffer) == 5
    np.testing.assert_allclose(buffer.probabilities(), np.array([4, 1, 2, 4, 4]) / 15.0)
    segment, offset = buffer.lookup(4)
    assert offset == 1
    assert segment.uid == 1


def test_probabilities_match_reference_under_appends_updates_and_eviction():
    """Test P(i) against a plain list of live priorities through random operations."""
    rng = np.random.default_rng(8)
    checks = 0
    while checks < 1000:
        alpha = float(rng.uniform(0.0, 1.5))
        buffer = ReplayBuffer(capacity=int(rng.integers(6, 25)), alpha=alpha)
        live = {}
        segments = []
        next_index = 0
        for _ in range(20):
            if not live or rng.random() < 0.4:
                owned = int(rng.integers(1, min(6, buffer.capacity) + 1))
                priority = max(live.values()) if live else 1.0
                while sum(live_owned for _, live_owned in segments) + owned > buffer.capacity:
                    start, evicted = segments.pop(0)
                    for index in range(start, start + evicted):
                        del live[index]
                assert buffer.append(_segment(owned)) == next_index
                segments.append((next_index, owned))
                for index in range(next_index, next_index + owned):
                    live[index] = priority
                next_index += owned
            else:
                candidates = np.arange(next_index)
                chosen = rng.choice(candidates, size=int(rng.integers(1, next_index + 1)), replace=False)
                errors = rng.normal(0.0, 2.0, chosen.size)
                errors[rng.random(chosen.size) < 0.1] = 0.0
                updated = buffer.update_priorities(chosen, errors)
                assert updated == sum(int(i) in live for i in chosen)
                for index, error in zip(chosen, errors):
                    if int(index) in live:
                        live[int(index)] = max(abs(float(error)), 1e-6)

            order = sorted(live)
            weights = [live[i] ** alpha for i in order]
            expected = [w / sum(weights) for w in weights]
            np.testing.assert_allclose(buffer.probabilities(), expected, rtol=1e-9)
            checks += 1


def test_sampling_frequencies_follow_priorities():
    """Test empirical draws match p^alpha / sum p^alpha."""
    buffer = ReplayBuffer(capacity=10, alpha=0.5)
    buffer.append(_segment(4))
    buffer.update_priorities(np.arange(4), [1.0, 4.0, 9.0, 16.0])
    expected = np.array([1.0, 2.0, 3.0, 4.0]) / 10.0

    indices, _ = buffer.sample(40_000, beta=0.4, rng=np.random.default_rng(0))
    frequencies = np.bincount(indices, minlength=4) / indices.size

    np.testing.assert_allclose(buffer.probabilities(), expected)
    np.testing.assert_allclose(frequencies, expected, atol=0.01)


def test_importance_weights():
    """Test weights are (N P)^-beta normalized by the batch maximum."""
    buffer = ReplayBuffer(capacity=10, alpha=1.0)
    buffer.append(_segment(2))
    buffer.update_priorities([0, 1], [1.0, 3.0])

    indices, weights = buffer.sample(200, beta=1.0, rng=np.random.default_rng(1))

    probabilities = np.where(indices == 0, 0.25, 0.75)
    raw = (2 * probabilities) ** -1.0
    np.testing.assert_allclose(weights, raw / raw.max())
    assert weights.max() == 1.0


def test_alpha_override_rebuilds_tree():
    """Test sampling with alpha=0 is uniform regardless of priorities."""
    buffer = ReplayBuffer(capacity=10, alpha=1.0)
    buffer.append(_segment(3))
    buffer.update_priorities([0, 1, 2], [1.0, 10.0, 100.0])

    buffer.sample(1, beta=0.4, rng=np.random.default_rng(0), alpha=0.0)

    np.testing.assert_allclose(buffer.probabilities(), np.full(3, 1.0 / 3.0))


def test_eviction_is_oldest_first():
    """Test whole segments leave in arrival order and their indices die."""
    buffer = ReplayBuffer(capacity=10)
    for _ in range(3):
        buffer.append(_segment(4))

    assert len(buffer) == 8
    assert buffer.num_segments == 2
    assert buffer.total_appended == 12
    with pytest.raises(IndexError):
        buffer.lookup(3)
    assert buffer.lookup(4)[1] == 0
    # evicted indices are skipped, never-allocated ones rejected
    assert buffer.update_priorities([0, 5, 11], [1.0, 1.0, 1.0]) == 2
    with pytest.raises(IndexError, match="out of range"):
        buffer.update_priorities([12], [1.0])
    indices, _ = buffer.sample(100, beta=0.4, rng=np.random.default_rng(2))
    assert indices.min() >= 4 and indices.max() <= 11


def test_priority_floor():
    """Test zero errors keep a small positive priority."""
    buffer = ReplayBuffer(capacity=4, alpha=1.0)
    buffer.append(_segment(2))
    buffer.update_priorities([0, 1], [0.0, 1.0])

    assert buffer.probabilities()[0] > 0.0


def test_sample_requires_min_size():
    """Test sampling below min_size raises ValueError."""
    buffer = ReplayBuffer(capacity=10, min_size=5)
    buffer.append(_segment(3))
    with pytest.raises(ValueError, match="need at least 5"):
        buffer.sample(2, beta=0.4, rng=np.random.default_rng(0))


def test_oversized_segment():
    """Test a segment larger than the capacity is refused."""
    with pytest.raises(ValueError, match="capacity"):
        ReplayBuffer(capacity=2).append(_segment(3))


def test_save_load_round_trip(tmp_path):
    """Test a snapshot restores segments, indices, env states and priorities."""
    buffer = ReplayBuffer(capacity=10, alpha=0.7, min_size=2)
    for step in range(3):
        buffer.append(_segment(4, stored=5, terminal=False, collection_step=step, with_states=True))
    buffer.update_priorities([5, 6], [3.0, 0.5])
    path = tmp_path / "replay.ezck"

    buffer.save(path)
    loaded = ReplayBuffer.load(path)

    assert len(loaded) == len(buffer)
    assert loaded.total_appended == 12
    np.testing.assert_allclose(loaded.probabilities(), buffer.probabilities())
    segment, offset = loaded.lookup(9)
    original, _ = buffer.lookup(9)
    assert offset == 1
    np.testing.assert_array_equal(segment.rewards, original.rewards)
    assert segment.env_states == original.env_states
    assert segment.uid == original.uid
    assert loaded.max_priority() == pytest.approx(buffer.max_priority())
