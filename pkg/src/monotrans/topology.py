"""Strictly monotonic transducer label topology.

Every frame emits exactly one output symbol, either blank or the next
target label, so an alignment of a length-S label sequence to T frames is
a choice of S label positions among T (there are binomial(T, S) of them).

Conventions shared by the whole package:
  * log probabilities are natural logs in float64,
  * blank is the last output index, id = V,
  * a joint log lattice is an ndarray of shape (T, S+1, V+1) whose
    (t, s) slice is a log-normalized distribution over V labels + blank.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

LOG_ZERO = -np.inf

# A label sequence is a plain tuple of ids in [0, V); it never contains blank.
LabelSeq = tuple[int, ...]

ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class AlignmentPath:
    """Blank-augmented frame-level sequence; `blank` is the blank id."""

    frames: tuple[int, ...]
    blank: int

    @property
    def T(self) -> int:
        return len(self.frames)


@dataclass
class FullSumResult:
    """Log-probability plus its gradient w.r.t. the lattice entries.

    occupancy[t, s, v] is the posterior probability that the path emits
    output v from state s at frame t; it equals d log_prob / d lattice[t, s, v].
    """

    log_prob: float
    occupancy: np.ndarray


def collapse(path: AlignmentPath) -> LabelSeq:
    """Remove all blanks from an alignment, order preserved."""
    return tuple(f for f in path.frames if f != path.blank)


def count_paths(T: int, S: int) -> int:
    """Number of monotonic alignments of S labels to T frames."""
    if T < 0 or S < 0 or S > T:
        raise ValueError(f"no monotonic alignments for T={T}, S={S}")
    return math.comb(T, S)


def enumerate_paths(T: int, S: int) -> list[AlignmentPath]:
    """All monotonic alignments over a skeleton target (test oracle support).

    Skeleton labels are the slot indices 0..S-1 and the skeleton blank id
    is S, so collapsing any returned path yields (0, 1, ..., S-1).  Callers
    map slots onto concrete label ids.
    """
    n = count_paths(T, S)
    if n > ENUMERATION_LIMIT:
        raise ValueError(f"refusing to enumerate {n} paths (limit {ENUMERATION_LIMIT})")
    paths = []
    for positions in itertools.combinations(range(T), S):
        frames = [S] * T
        for slot, t in enumerate(positions):
            frames[t] = slot
        paths.append(AlignmentPath(frames=tuple(frames), blank=S))
    return paths


def _check_lattice(lattice: np.ndarray, target: LabelSeq) -> tuple[int, int, int]:
    if lattice.ndim != 3:
        raise ValueError(f"lattice must be (T, S+1, V+1), got shape {lattice.shape}")
    T, S1, V1 = lattice.shape
    if S1 != len(target) + 1:
        raise ValueError(f"lattice has {S1 - 1} target slots but target has {len(target)}")
    return T, S1 - 1, V1 - 1


def _emission_tables(lattice: np.ndarray, target: LabelSeq):
    """B[t, s]: blank log-prob at (t, s); E[t, s]: log-prob of emitting target[s]."""
    V = lattice.shape[2] - 1
    B = lattice[:, :, V]
    if target:
        E = lattice[:, np.arange(len(target)), np.asarray(target)]
    else:
        E = np.zeros((lattice.shape[0], 0))
    return B, E


def fullsum(lattice: np.ndarray, target: LabelSeq) -> FullSumResult:
    """Exact log-sum over all monotonic alignments, with occupancy gradients.

    Forward recursion over Q[t, s] = log P(first t frames consumed, first s
    labels emitted):

        Q[0, 0] = 0
        Q[t, s] = logaddexp(Q[t-1, s] + lattice[t-1, s, blank],
                            Q[t-1, s-1] + lattice[t-1, s-1, target[s-1]])

    The occupancy table is produced by the matching backward recursion and
    is the exact gradient of log_prob w.r.t. the lattice entries.
    Infeasible instances (S > T) return log_prob = -inf and zero occupancy.
    """
    target = tuple(target)
    T, S, V = _check_lattice(lattice, target)
    occupancy = np.zeros_like(lattice)
    if S > T:
        return FullSumResult(log_prob=LOG_ZERO, occupancy=occupancy)

    B, E = _emission_tables(lattice, target)

    Q = np.full((T + 1, S + 1), LOG_ZERO)
    Q[0, 0] = 0.0
    for t in range(1, T + 1):
        stay = Q[t - 1] + B[t - 1]
        Q[t, 0] = stay[0]
        if S:
            Q[t, 1:] = np.logaddexp(stay[1:], Q[t - 1, :-1] + E[t - 1])
    log_prob = Q[T, S]
    if not np.isfinite(log_prob):
        return FullSumResult(log_prob=float(log_prob), occupancy=occupancy)

    R = np.full((T + 1, S + 1), LOG_ZERO)
    R[T, S] = 0.0
    for t in range(T - 1, -1, -1):
        stay = R[t + 1] + B[t]
        R[t] = stay
        if S:
            R[t, :-1] = np.logaddexp(stay[:-1], R[t + 1, 1:] + E[t])

    ts = np.arange(T)[:, None]
    ss = np.arange(S + 1)[None, :]
    occupancy[ts, ss, V] = np.exp(Q[:-1] + B + R[1:, :] - log_prob)
    if S:
        emit = np.exp(Q[:-1, :-1] + E + R[1:, 1:] - log_prob)
        occupancy[ts, np.arange(S)[None, :], np.asarray(target)[None, :]] = emit
    return FullSumResult(log_prob=float(log_prob), occupancy=occupancy)


def viterbi_score(lattice: np.ndarray, target: LabelSeq) -> tuple[float, AlignmentPath]:
    """Best single alignment; max replaces logaddexp in the fullsum recursion.

    Ties prefer the label emission, which makes the backtrace deterministic.
    """
    target = tuple(target)
    T, S, V = _check_lattice(lattice, target)
    if S > T:
        return LOG_ZERO, AlignmentPath(frames=(), blank=V)

    B, E = _emission_tables(lattice, target)
    Q = np.full((T + 1, S + 1), LOG_ZERO)
    Q[0, 0] = 0.0
    came_by_emit = np.zeros((T + 1, S + 1), dtype=bool)
    for t in range(1, T + 1):
        stay = Q[t - 1] + B[t - 1]
        Q[t, 0] = stay[0]
        if S:
            emit = Q[t - 1, :-1] + E[t - 1]
            pick = emit >= stay[1:]
            Q[t, 1:] = np.where(pick, emit, stay[1:])
            came_by_emit[t, 1:] = pick

    frames = []
    s = S
    for t in range(T, 0, -1):
        if s > 0 and came_by_emit[t, s]:
            frames.append(target[s - 1])
            s -= 1
        else:
            frames.append(V)
    frames.reverse()
    return float(Q[T, S]), AlignmentPath(frames=tuple(frames), blank=V)
