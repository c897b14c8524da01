import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monotrans.oracles import fullsum_by_enumeration, viterbi_by_enumeration
from monotrans.topology import (
    AlignmentPath,
    collapse,
    count_paths,
    enumerate_paths,
    fullsum,
    viterbi_score,
)


def random_log_lattice(T, S, V, seed):
    """Seeded random lattice with log-normalized (t, s) slices."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(T, S + 1, V + 1))
    return raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))


def random_target(S, V, seed):
    rng = np.random.default_rng(seed + 7919)
    return tuple(int(x) for x in rng.integers(0, V, size=S))


def test_collapse_all_blank():
    assert collapse(AlignmentPath(frames=(3, 3, 3), blank=3)) == ()


def test_collapse_identity():
    assert collapse(AlignmentPath(frames=(0, 1, 2), blank=3)) == (0, 1, 2)


def test_collapse_interleaved():
    assert collapse(AlignmentPath(frames=(0, 3, 1, 3), blank=3)) == (0, 1)


def test_count_paths_examples():
    assert count_paths(3, 1) == 3
    assert count_paths(7, 0) == 1
    assert count_paths(5, 2) == 10


def test_count_paths_rejects_s_greater_t():
    with pytest.raises(ValueError):
        count_paths(2, 3)


def test_enumerate_paths_small():
    paths = {p.frames for p in enumerate_paths(2, 1)}
    assert paths == {(0, 1), (1, 0)}
    assert [p.frames for p in enumerate_paths(2, 0)] == [(0, 0)]


def test_enumerate_paths_matches_count():
    paths = enumerate_paths(4, 2)
    assert len(paths) == count_paths(4, 2) == 6
    for p in paths:
        assert collapse(p) == (0, 1)


def test_enumerate_paths_guard():
    with pytest.raises(ValueError):
        enumerate_paths(40, 20)


def test_fullsum_single_forced_path():
    lat = random_log_lattice(2, 2, 3, seed=1)
    target = (0, 2)
    res = fullsum(lat, target)
    assert res.log_prob == pytest.approx(lat[0, 0, 0] + lat[1, 1, 2], abs=1e-12)


def test_fullsum_all_blank():
    lat = random_log_lattice(3, 0, 3, seed=2)
    res = fullsum(lat, ())
    assert res.log_prob == pytest.approx(lat[:, 0, 3].sum(), abs=1e-12)


def test_fullsum_matches_enumeration_seeded():
    lat = random_log_lattice(4, 2, 3, seed=3)
    target = random_target(2, 3, seed=3)
    res = fullsum(lat, target)
    assert abs(res.log_prob - fullsum_by_enumeration(lat, target)) <= 1e-9


def test_fullsum_infeasible():
    lat = random_log_lattice(2, 3, 3, seed=4)
    res = fullsum(lat, (0, 1, 2))
    assert res.log_prob == -np.inf
    assert not res.occupancy.any()


def test_fullsum_diagonal_when_s_equals_t():
    T = 5
    lat = random_log_lattice(T, T, 4, seed=5)
    target = random_target(T, 4, seed=5)
    expected = sum(lat[t, t, target[t]] for t in range(T))
    assert fullsum(lat, target).log_prob == pytest.approx(expected, abs=1e-12)


def test_occupancy_sums_to_one_per_frame():
    lat = random_log_lattice(6, 3, 4, seed=6)
    target = random_target(3, 4, seed=6)
    res = fullsum(lat, target)
    frame_sums = res.occupancy.sum(axis=(1, 2))
    assert np.all(np.abs(frame_sums - 1.0) <= 1e-9)
    assert res.occupancy.min() >= 0.0
    assert res.occupancy.max() <= 1.0


def test_occupancy_is_finite_difference_gradient():
    lat = random_log_lattice(5, 3, 3, seed=7)
    target = random_target(3, 3, seed=7)
    res = fullsum(lat, target)
    h = 1e-5
    for idx in np.ndindex(lat.shape):
        bump = np.zeros_like(lat)
        bump[idx] = h
        fd = (fullsum(lat + bump, target).log_prob - fullsum(lat - bump, target).log_prob) / (2 * h)
        ana = res.occupancy[idx]
        assert abs(fd - ana) <= 1e-4 * max(abs(fd), abs(ana), 1e-8)


def test_viterbi_single_path_equals_fullsum():
    lat = random_log_lattice(2, 2, 3, seed=8)
    target = (1, 0)
    score, path = viterbi_score(lat, target)
    assert score == pytest.approx(fullsum(lat, target).log_prob, abs=1e-12)
    assert path.frames == (1, 0)


def test_viterbi_degenerate_lattice():
    # all mass on blank, blank, label 2, blank
    T, S, V = 4, 1, 3
    lat = np.full((T, S + 1, V + 1), -1e9)
    lat[0, 0, V] = 0.0
    lat[1, 0, V] = 0.0
    lat[2, 0, 2] = 0.0
    lat[3, 1, V] = 0.0
    score, path = viterbi_score(lat, (2,))
    assert path.frames == (V, V, 2, V)
    assert score == pytest.approx(0.0, abs=1e-6)


def test_viterbi_matches_enumeration_seeded():
    lat = random_log_lattice(4, 2, 3, seed=9)
    target = random_target(2, 3, seed=9)
    score, path = viterbi_score(lat, target)
    ref_score, ref_frames = viterbi_by_enumeration(lat, target)
    assert score == pytest.approx(ref_score, abs=1e-9)
    assert collapse(path) == tuple(target)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_fullsum_dominates_viterbi(T, S, V, seed):
    if S > T:
        S = T
    lat = random_log_lattice(T, S, V, seed)
    target = random_target(S, V, seed)
    fs = fullsum(lat, target).log_prob
    vit, _ = viterbi_score(lat, target)
    assert fs >= vit - 1e-12
    if count_paths(T, S) == 1:
        assert fs == pytest.approx(vit, abs=1e-12)


def test_bruteforce_sweep():
    checked = 0
    for T in range(1, 7):
        for S in range(0, min(T, 4) + 1):
            for V in (1, 3, 5):
                lat = random_log_lattice(T, S, V, seed=100 + checked)
                target = random_target(S, V, seed=100 + checked)
                got = fullsum(lat, target).log_prob
                want = fullsum_by_enumeration(lat, target)
                assert abs(got - want) <= 1e-9
                checked += 1
    assert checked > 50
