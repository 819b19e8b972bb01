import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import window_max_labels
from safecoord.hazard import HazardLabelConfig, instantaneous, label_batch, lookahead


@pytest.mark.parametrize("c,expected", [(0.2, 1), (0.1, 0), (0.0, 0)])
def test_instantaneous_examples(c, expected):
    assert instantaneous(c, 0.1) == expected


def test_lookahead_single_episode_example():
    np.testing.assert_array_equal(lookahead([0, 1, 0, 0, 1], 2), [1, 1, 1, 1, 1])


def test_lookahead_zero_horizon_is_identity():
    z = np.array([0, 1, 1, 0, 1, 0])
    np.testing.assert_array_equal(lookahead(z, 0), z)


def test_lookahead_does_not_cross_boundary():
    np.testing.assert_array_equal(lookahead([0, 0, 1], 5, dones=[0, 1, 0]), [0, 0, 1])


def test_lookahead_truncates_at_sequence_end():
    np.testing.assert_array_equal(lookahead([1, 0, 0, 0], 2), [1, 0, 0, 0])


def test_lookahead_trailing_axes_independent():
    z = np.array([[0, 1], [1, 0], [0, 0]])
    dones = np.array([[0, 0], [0, 1], [0, 0]])
    h = lookahead(z, 1, dones)
    for a in range(2):
        np.testing.assert_array_equal(h[:, a], window_max_labels(z[:, a], 1, dones[:, a]))


def test_lookahead_broadcasts_instance_dones_over_agents():
    rng = np.random.default_rng(0)
    z = rng.integers(0, 2, (12, 3, 2))
    dones = rng.random((12, 3)) < 0.2
    h = lookahead(z, 3, dones)
    for e in range(3):
        for i in range(2):
            assert h[:, e, i].tolist() == window_max_labels(z[:, e, i], 3, dones[:, e])


def test_config_validation():
    with pytest.raises(ValueError):
        HazardLabelConfig(threshold=0.0)
    with pytest.raises(ValueError):
        HazardLabelConfig(horizon=-1)
    with pytest.raises(ValueError):
        HazardLabelConfig(horizon=1.5)


def test_label_batch_uses_threshold_and_horizon():
    costs = np.array([0.0, 0.05, 0.2, 0.0, 0.0])
    z, h = label_batch(costs, np.zeros(5, bool), HazardLabelConfig(0.1, 1))
    np.testing.assert_array_equal(z, [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(h, [0, 1, 1, 0, 0])


def test_lookahead_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        T = int(rng.integers(1, 40))
        z = (rng.random(T) < rng.random()).astype(int)
        boundary = rng.random(T) < 0.15
        H = int(rng.integers(0, 11))
        if lookahead(z, H, boundary).tolist() != window_max_labels(z, H, boundary):
            mismatches += 1
    assert mismatches == 0


seqs = st.integers(1, 40).flatmap(
    lambda T: st.tuples(st.lists(st.integers(0, 1), min_size=T, max_size=T), st.lists(st.booleans(), min_size=T, max_size=T))
)


@settings(max_examples=200, deadline=None)
@given(seqs, st.integers(0, 10), st.integers(0, 10))
def test_lookahead_monotone_in_horizon(zb, h1, h2):
    z, b = zb
    lo, hi = sorted((h1, h2))
    assert np.all(lookahead(z, hi, b) >= lookahead(z, lo, b))


@settings(max_examples=200, deadline=None)
@given(seqs, st.integers(0, 10))
def test_labels_dominate_events(zb, H):
    z, b = zb
    h = lookahead(z, H, b)
    assert np.all(h >= np.asarray(z)) and h.mean() >= np.mean(z)
    for t in np.flatnonzero(h):
        end = t
        while end < len(z) - 1 and not b[end] and end < t + H:
            end += 1
        assert any(z[t : end + 1])
