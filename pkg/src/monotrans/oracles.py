"""Brute-force reference computations used to cross-check the dynamic programs.

These enumerate alignment spaces outright and never call the forward-backward
code they are compared against.
"""

from __future__ import annotations

import itertools

import numpy as np

from .topology import LabelSeq, enumerate_paths


def fullsum_by_enumeration(lattice: np.ndarray, target: LabelSeq) -> float:
    """log sum over every monotonic alignment, one path at a time."""
    target = tuple(target)
    T, S1, V1 = lattice.shape
    S, V = S1 - 1, V1 - 1
    if S > T:
        return float("-inf")
    scores = []
    for path in enumerate_paths(T, S):
        s = 0
        total = 0.0
        for t, slot in enumerate(path.frames):
            if slot == path.blank:
                total += lattice[t, s, V]
            else:
                total += lattice[t, s, target[s]]
                s += 1
        scores.append(total)
    return float(np.logaddexp.reduce(scores))


def viterbi_by_enumeration(lattice: np.ndarray, target: LabelSeq) -> tuple[float, tuple[int, ...]]:
    """Best monotonic alignment by exhaustive search; ties prefer label emission order."""
    target = tuple(target)
    T, S1, V1 = lattice.shape
    S, V = S1 - 1, V1 - 1
    best = float("-inf")
    best_frames: tuple[int, ...] = ()
    for path in enumerate_paths(T, S):
        s = 0
        total = 0.0
        frames = []
        for t, slot in enumerate(path.frames):
            if slot == path.blank:
                total += lattice[t, s, V]
                frames.append(V)
            else:
                total += lattice[t, s, target[s]]
                frames.append(target[s])
                s += 1
        if total > best:
            best = total
            best_frames = tuple(frames)
    return float(best), best_frames


def ctc_collapse(frames, blank: int) -> tuple[int, ...]:
    """CTC collapsing rules: merge repeats, then drop blanks."""
    out = []
    prev = None
    for f in frames:
        if f != prev and f != blank:
            out.append(f)
        prev = f
    return tuple(out)


def ctc_logprob_by_enumeration(logits: np.ndarray, target: LabelSeq) -> float:
    """Sum over every frame labelling in (V+1)^T whose CTC collapse equals the target."""
    target = tuple(target)
    T, V1 = logits.shape
    blank = V1 - 1
    if V1**T > 10**7:
        raise ValueError("enumeration space too large")
    scores = []
    for frames in itertools.product(range(V1), repeat=T):
        if ctc_collapse(frames, blank) == target:
            scores.append(sum(logits[t, f] for t, f in enumerate(frames)))
    if not scores:
        return float("-inf")
    return float(np.logaddexp.reduce(scores))
