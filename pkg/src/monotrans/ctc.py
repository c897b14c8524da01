"""CTC loss for the small alignment model and transducer-ready alignments.

The forward-backward runs over the blank-interleaved expanded target
(blank, a1, blank, a2, ..., blank). Blank is the last output index, matching
the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ParamStore, frame_window, frame_window_backward, load_checkpoint, log_softmax, log_softmax_backward, save_checkpoint
from .topology import LOG_ZERO, AlignmentPath, LabelSeq

BLANK_TOKEN = "_"


@dataclass(frozen=True)
class FrameAlignment:
    """Per-frame CTC output (labels repeat across a segment's frames)."""

    frames: tuple[int, ...]
    blank: int
    source: str = "ctc_viterbi"


def _expand(target: LabelSeq, blank: int) -> list[int]:
    ext = [blank]
    for a in target:
        ext.extend((a, blank))
    return ext


def ctc_fullsum(logits: np.ndarray, target: LabelSeq) -> tuple[float, np.ndarray]:
    """CTC log-probability of the target, plus d log_prob / d logits.

    logits: (T, V+1) log-normalized rows. Returns -inf and a zero gradient
    table when the target is unreachable in T frames.
    """
    target = tuple(target)
    T, V1 = logits.shape
    blank = V1 - 1
    ext = _expand(target, blank)
    L = len(ext)
    grad = np.zeros_like(logits)

    allow_skip = np.zeros(L, dtype=bool)
    for j in range(2, L):
        allow_skip[j] = ext[j] != blank and ext[j] != ext[j - 2]

    alpha = np.full((T, L), LOG_ZERO)
    alpha[0, 0] = logits[0, ext[0]]
    if L > 1:
        alpha[0, 1] = logits[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(allow_skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logits[t, ext]
    log_prob = alpha[T - 1, L - 1]
    if L > 1:
        log_prob = np.logaddexp(log_prob, alpha[T - 1, L - 2])
    if not np.isfinite(log_prob):
        return float(LOG_ZERO), grad

    beta = np.full((T, L), LOG_ZERO)
    beta[T - 1, L - 1] = 0.0
    if L > 1:
        beta[T - 1, L - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logits[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(allow_skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    # d log_prob / d logits[t, v] = total state posterior carrying output v at t
    posterior = np.exp(alpha + beta - log_prob)
    for j, lab in enumerate(ext):
        grad[:, lab] += posterior[:, j]
    return float(log_prob), grad


def ctc_viterbi_align(logits: np.ndarray, target: LabelSeq) -> FrameAlignment:
    """Max-probability CTC state path, emitted as per-frame labels/blanks."""
    target = tuple(target)
    T, V1 = logits.shape
    blank = V1 - 1
    ext = _expand(target, blank)
    L = len(ext)

    allow_skip = np.zeros(L, dtype=bool)
    for j in range(2, L):
        allow_skip[j] = ext[j] != blank and ext[j] != ext[j - 2]

    score = np.full((T, L), LOG_ZERO)
    back = np.zeros((T, L), dtype=int)
    score[0, 0] = logits[0, ext[0]]
    if L > 1:
        score[0, 1] = logits[0, ext[1]]
    for t in range(1, T):
        for j in range(L):
            cands = [(score[t - 1, j], j)]
            if j >= 1:
                cands.append((score[t - 1, j - 1], j - 1))
            if j >= 2 and allow_skip[j]:
                cands.append((score[t - 1, j - 2], j - 2))
            best, src = max(cands)
            score[t, j] = best + logits[t, ext[j]]
            back[t, j] = src
    ends = [(score[T - 1, L - 1], L - 1)]
    if L > 1:
        ends.append((score[T - 1, L - 2], L - 2))
    best, j = max(ends)
    if not np.isfinite(best):
        raise ValueError(f"target of length {len(target)} unreachable in {T} frames")
    states = [j]
    for t in range(T - 1, 0, -1):
        j = back[t, j]
        states.append(j)
    states.reverse()
    return FrameAlignment(frames=tuple(ext[j] for j in states), blank=blank)


def to_transducer_alignment(fa: FrameAlignment) -> AlignmentPath:
    """Emit each label at the last frame of its segment, blank elsewhere.

    Segments are maximal same-label runs broken by blanks or label changes,
    so blank-separated repeats stay distinct.
    """
    frames = list(fa.frames)
    out = [fa.blank] * len(frames)
    for t, f in enumerate(frames):
        if f == fa.blank:
            continue
        last = t + 1 == len(frames) or frames[t + 1] != f
        if last:
            out[t] = f
    return AlignmentPath(frames=tuple(out), blank=fa.blank)


# ------------------------------------------------------------ alignment model


@dataclass
class CtcModelConfig:
    V: int
    feat_dim: int
    hidden_dim: int = 12
    layers: int = 1
    window: int = 5
    subsample: int = 1

    def __post_init__(self):
        if min(self.V, self.feat_dim, self.hidden_dim, self.layers) < 1:
            raise ValueError("all dimensions must be >= 1")


class CtcAlignModel:
    """Deliberately small windowed-affine network with the same subsampling
    as the transducer encoder, so alignments transfer frame-for-frame."""

    def __init__(self, cfg: CtcModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: CtcModelConfig, seed: int = 0) -> "CtcAlignModel":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d_in = cfg.feat_dim
        for i in range(cfg.layers):
            fan = cfg.window * d_in
            store.add(f"layer{i}_W", rng.normal(scale=1.0 / np.sqrt(fan), size=(fan, cfg.hidden_dim)))
            store.add(f"layer{i}_b", np.zeros(cfg.hidden_dim))
            d_in = cfg.hidden_dim
        store.add("out_W", rng.normal(scale=1.0 / np.sqrt(cfg.hidden_dim), size=(cfg.hidden_dim, cfg.V + 1)))
        store.add("out_b", np.zeros(cfg.V + 1))
        return cls(cfg, store)

    def forward(self, features: np.ndarray):
        features = np.asarray(features, dtype=np.float64)
        cfg = self.cfg
        framed, tanh_out = [], []
        x = features
        for i in range(cfg.layers):
            stride = cfg.subsample if i == 0 else 1
            F = frame_window(x, cfg.window, stride)
            H = np.tanh(F @ self.store[f"layer{i}_W"] + self.store[f"layer{i}_b"])
            framed.append(F)
            tanh_out.append(H)
            x = H
        logp = log_softmax(x @ self.store["out_W"] + self.store["out_b"])
        return logp, (framed, tanh_out, logp)

    def backward(self, cache, d_logp: np.ndarray):
        framed, tanh_out, logp = cache
        cfg = self.cfg
        d_logits = log_softmax_backward(logp, d_logp)
        self.store.grads["out_W"] += tanh_out[-1].T @ d_logits
        self.store.grads["out_b"] += d_logits.sum(axis=0)
        d = d_logits @ self.store["out_W"].T
        for i in range(cfg.layers - 1, -1, -1):
            dA = d * (1.0 - tanh_out[i] ** 2)
            self.store.grads[f"layer{i}_W"] += framed[i].T @ dA
            self.store.grads[f"layer{i}_b"] += dA.sum(axis=0)
            if i > 0:
                dF = dA @ self.store[f"layer{i}_W"].T
                T_prev, D_prev = tanh_out[i - 1].shape
                d = frame_window_backward(dF, T_prev, D_prev, cfg.window, 1)

    def save(self, path):
        from dataclasses import asdict

        save_checkpoint(path, "ctc", asdict(self.cfg), self.store)

    @classmethod
    def load(cls, path) -> "CtcAlignModel":
        kind, cfg_dict, store = load_checkpoint(path)
        if kind != "ctc":
            raise ValueError(f"checkpoint holds a {kind!r} model, not a ctc aligner")
        return cls(CtcModelConfig(**cfg_dict), store)


# ------------------------------------------------------------- alignment file


def write_alignments(path, alignments: dict[str, AlignmentPath], blank: int):
    """One record per utterance: id, T, per-frame ids with blank as "_"."""
    lines = [f"#alignments v1 blank={blank}"]
    for utt_id in alignments:
        p = alignments[utt_id]
        toks = " ".join(BLANK_TOKEN if f == p.blank else str(f) for f in p.frames)
        lines.append(f"{utt_id} {p.T} {toks}".rstrip())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_alignments(path) -> dict[str, AlignmentPath]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#alignments v1"):
            raise ValueError(f"{path}: unrecognized alignment file header")
        blank = int(header.split("blank=")[1])
        out = {}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            utt_id, T = parts[0], int(parts[1])
            frames = tuple(blank if tok == BLANK_TOKEN else int(tok) for tok in parts[2:])
            if len(frames) != T:
                raise ValueError(f"{path}: frame count mismatch for {utt_id}")
            out[utt_id] = AlignmentPath(frames=frames, blank=blank)
    return out
