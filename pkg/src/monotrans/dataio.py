"""Synthetic transduction corpus, masking augmentation, and dataset files.

Labels are drawn from a bigram grammar (so an external LM has something to
learn) and each label contributes 1-3 noisy copies of its prototype vector.
Features are stored and consumed as little-endian float32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .topology import LabelSeq

SPLITS = ("train", "dev", "test")


@dataclass
class SyntheticSpec:
    seed: int = 2024
    vocab: int = 10
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    min_labels: int = 3
    max_labels: int = 8
    min_frames_per_label: int = 1
    max_frames_per_label: int = 3
    feat_dim: int = 8
    noise_sigma: float = 0.3
    transitions: np.ndarray | None = None

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("need at least 2 labels")
        if not (0 < self.min_labels <= self.max_labels):
            raise ValueError("bad label length range")
        if not (1 <= self.min_frames_per_label <= self.max_frames_per_label):
            raise ValueError("bad frames-per-label range")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Utterance:
    id: str
    feats: np.ndarray  # (T, feat_dim) float32
    labels: LabelSeq

    @property
    def T(self) -> int:
        return self.feats.shape[0]

    @property
    def S(self) -> int:
        return len(self.labels)


def default_grammar(K: int) -> np.ndarray:
    """Peaked bigram transition table with zero self-transitions.

    Adjacent CTC-style label loops would make some targets unreachable for
    the alignment model, so the diagonal is kept empty.
    """
    P = np.ones((K, K))
    for i in range(K):
        P[i, (i + 1) % K] = 6.0
        P[i, (i + 2) % K] = 3.0
        P[i, i] = 0.0
    return P / P.sum(axis=1, keepdims=True)


def label_prototypes(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    return rng.normal(size=(spec.vocab, spec.feat_dim))


def _make_utterance(spec, protos, trans, split_idx, idx, split):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 + split_idx, idx]))
    S = int(rng.integers(spec.min_labels, spec.max_labels + 1))
    labels = [int(rng.integers(0, spec.vocab))]
    for _ in range(S - 1):
        labels.append(int(rng.choice(spec.vocab, p=trans[labels[-1]])))
    frames = []
    for lab in labels:
        n = int(rng.integers(spec.min_frames_per_label, spec.max_frames_per_label + 1))
        frames.append(protos[lab] + spec.noise_sigma * rng.normal(size=(n, spec.feat_dim)))
    feats = np.concatenate(frames).astype(np.float32)
    return Utterance(id=f"{split}-{idx:05d}", feats=feats, labels=tuple(labels))


def generate(spec: SyntheticSpec) -> dict[str, list[Utterance]]:
    """Deterministic train/dev/test splits with per-utterance derived seeds."""
    protos = label_prototypes(spec)
    trans = spec.transitions if spec.transitions is not None else default_grammar(spec.vocab)
    counts = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    out = {}
    for split_idx, split in enumerate(SPLITS):
        out[split] = [
            _make_utterance(spec, protos, trans, split_idx, i, split) for i in range(counts[split])
        ]
    return out


def mask_augment(
    features: np.ndarray,
    time_masks: int,
    feat_masks: int,
    seed: int,
    time_width: int = 2,
    feat_width: int = 1,
) -> np.ndarray:
    """Zero seeded random time spans and feature channels (shape preserved)."""
    out = np.array(features, copy=True)
    if time_masks == 0 and feat_masks == 0:
        return out
    rng = np.random.default_rng(seed)
    T, D = out.shape
    for _ in range(time_masks):
        w = min(time_width, T)
        if w <= 0:
            continue
        start = int(rng.integers(0, T - w + 1))
        out[start : start + w, :] = 0.0
    for _ in range(feat_masks):
        w = min(feat_width, D)
        if w <= 0:
            continue
        start = int(rng.integers(0, D - w + 1))
        out[:, start : start + w] = 0.0
    return out


def length_filter(utterances, max_T=None, max_S=None):
    """Drop utterances whose frame or label counts exceed the thresholds."""
    kept, removed = [], 0
    for u in utterances:
        if (max_T is not None and u.T > max_T) or (max_S is not None and u.S > max_S):
            removed += 1
        else:
            kept.append(u)
    return kept, removed


# ------------------------------------------------------------- dataset files


def save_split(split_dir, utterances, feat_dim: int):
    os.makedirs(os.path.join(split_dir, "feats"), exist_ok=True)
    manifest = [f"#dataset v1 feat_dim={feat_dim}"]
    transcript = []
    for u in utterances:
        if u.feats.shape[1] != feat_dim:
            raise ValueError(f"{u.id}: feat_dim {u.feats.shape[1]} != {feat_dim}")
        manifest.append(f"{u.id}\t{u.T}\t{u.S}")
        transcript.append((u.id + " " + " ".join(str(x) for x in u.labels)).rstrip())
        with open(os.path.join(split_dir, "feats", f"{u.id}.f32"), "wb") as fh:
            fh.write(np.ascontiguousarray(u.feats, dtype="<f4").tobytes())
    with open(os.path.join(split_dir, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(manifest) + "\n")
    with open(os.path.join(split_dir, "transcript.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(transcript) + "\n")


def load_split(split_dir) -> list[Utterance]:
    with open(os.path.join(split_dir, "manifest.tsv"), "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#dataset v1"):
            raise ValueError(f"{split_dir}: unrecognized manifest header")
        feat_dim = int(header.split("feat_dim=")[1])
        rows = [line.split("\t") for line in fh.read().splitlines() if line]
    labels = {}
    with open(os.path.join(split_dir, "transcript.txt"), "r", encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            if not line:
                continue
            parts = line.split()
            labels[parts[0]] = tuple(int(x) for x in parts[1:])
    utts = []
    for utt_id, T, S in rows:
        with open(os.path.join(split_dir, "feats", f"{utt_id}.f32"), "rb") as fh:
            feats = np.frombuffer(fh.read(), dtype="<f4").reshape(int(T), feat_dim).copy()
        if len(labels[utt_id]) != int(S):
            raise ValueError(f"{utt_id}: transcript length mismatch")
        utts.append(Utterance(id=utt_id, feats=feats, labels=labels[utt_id]))
    return utts


def save_dataset(root, splits: dict[str, list[Utterance]], feat_dim: int):
    for split, utts in splits.items():
        save_split(os.path.join(root, split), utts, feat_dim)


def load_dataset(root) -> dict[str, list[Utterance]]:
    return {split: load_split(os.path.join(root, split)) for split in SPLITS if os.path.isdir(os.path.join(root, split))}
