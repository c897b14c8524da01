import numpy as np
import pytest

from monotrans.ctc import (
    FrameAlignment,
    ctc_fullsum,
    ctc_viterbi_align,
    read_alignments,
    to_transducer_alignment,
    write_alignments,
)
from monotrans.oracles import ctc_collapse, ctc_logprob_by_enumeration
from monotrans.topology import AlignmentPath, collapse


def random_ctc_logits(T, V, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(T, V + 1))
    return raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))


def test_forced_path_distinct_labels():
    lg = random_ctc_logits(3, 3, seed=0)
    target = (0, 1, 2)
    lp, _ = ctc_fullsum(lg, target)
    assert lp == pytest.approx(lg[0, 0] + lg[1, 1] + lg[2, 2], abs=1e-12)


def test_repeat_needs_blank():
    lg = random_ctc_logits(2, 3, seed=1)
    lp, grad = ctc_fullsum(lg, (1, 1))
    assert lp == -np.inf
    assert not grad.any()


def test_matches_enumeration_seeded():
    lg = random_ctc_logits(4, 3, seed=2)
    lp, _ = ctc_fullsum(lg, (0, 1))
    assert abs(lp - ctc_logprob_by_enumeration(lg, (0, 1))) <= 1e-9


def test_bruteforce_sweep():
    rng = np.random.default_rng(3)
    for trial in range(60):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(1, 5))
        S = int(rng.integers(0, 4))
        target = tuple(int(x) for x in rng.integers(0, V, size=S))
        lg = random_ctc_logits(T, V, seed=1000 + trial)
        got, _ = ctc_fullsum(lg, target)
        want = ctc_logprob_by_enumeration(lg, target)
        if want == -np.inf:
            assert got == -np.inf
        else:
            assert abs(got - want) <= 1e-9


def test_gradient_matches_finite_differences():
    lg = random_ctc_logits(5, 3, seed=4)
    target = (2, 0)
    _, grad = ctc_fullsum(lg, target)
    h = 1e-5
    for idx in np.ndindex(lg.shape):
        bump = np.zeros_like(lg)
        bump[idx] = h
        fd = (ctc_fullsum(lg + bump, target)[0] - ctc_fullsum(lg - bump, target)[0]) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx]), 1e-8)


def test_viterbi_forced_path():
    lg = random_ctc_logits(2, 3, seed=5)
    fa = ctc_viterbi_align(lg, (0, 1))
    assert fa.frames == (0, 1)


def test_viterbi_concentrated():
    T, V = 5, 3
    lg = np.full((T, V + 1), -1e9)
    wanted = (V, 1, 1, V, 2)
    for t, f in enumerate(wanted):
        lg[t, f] = 0.0
    fa = ctc_viterbi_align(lg, (1, 2))
    assert fa.frames == wanted


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(6)
    for trial in range(20):
        T = int(rng.integers(2, 6))
        V = int(rng.integers(2, 4))
        S = int(rng.integers(1, 3))
        target = tuple(int(x) for x in rng.integers(0, V, size=S))
        lg = random_ctc_logits(T, V, seed=2000 + trial)
        if ctc_logprob_by_enumeration(lg, target) == -np.inf:
            continue
        fa = ctc_viterbi_align(lg, target)
        score = sum(lg[t, f] for t, f in enumerate(fa.frames))
        # enumerate all legal frame labellings and take the best score
        import itertools

        best = -np.inf
        for frames in itertools.product(range(V + 1), repeat=T):
            if ctc_collapse(frames, V) == target:
                best = max(best, sum(lg[t, f] for t, f in enumerate(frames)))
        assert score == pytest.approx(best, abs=1e-9)
        assert ctc_collapse(fa.frames, V) == target


def test_viterbi_unreachable_raises():
    lg = random_ctc_logits(2, 3, seed=7)
    with pytest.raises(ValueError):
        ctc_viterbi_align(lg, (1, 1, 2))


def test_segment_last_frame_rule():
    fa = FrameAlignment(frames=(0, 0, 3, 1), blank=3)
    assert to_transducer_alignment(fa).frames == (3, 0, 3, 1)


def test_all_blank_stays_blank():
    fa = FrameAlignment(frames=(3, 3, 3), blank=3)
    assert to_transducer_alignment(fa).frames == (3, 3, 3)


def test_blank_separated_repeats_stay_distinct():
    fa = FrameAlignment(frames=(0, 3, 0), blank=3)
    assert to_transducer_alignment(fa).frames == (0, 3, 0)


def test_transducer_alignment_invariants():
    rng = np.random.default_rng(8)
    for trial in range(40):
        T = int(rng.integers(2, 8))
        V = int(rng.integers(2, 4))
        S = int(rng.integers(0, 3))
        target = tuple(int(x) for x in rng.integers(0, V, size=S))
        lg = random_ctc_logits(T, V, seed=3000 + trial)
        if ctc_logprob_by_enumeration(lg, target) == -np.inf:
            continue
        fa = ctc_viterbi_align(lg, target)
        path = to_transducer_alignment(fa)
        assert collapse(path) == target
        assert sum(1 for f in path.frames if f != path.blank) == len(target)


def test_alignment_file_round_trip(tmp_path):
    blank = 4
    alignments = {
        "utt-a": AlignmentPath(frames=(4, 0, 4, 2), blank=blank),
        "utt-b": AlignmentPath(frames=(4, 4, 4), blank=blank),
        "utt-c": AlignmentPath(frames=(), blank=blank),
    }
    p = tmp_path / "align.txt"
    write_alignments(p, alignments, blank)
    back = read_alignments(p)
    assert back == alignments
    p2 = tmp_path / "align2.txt"
    write_alignments(p2, back, blank)
    assert p.read_bytes() == p2.read_bytes()
