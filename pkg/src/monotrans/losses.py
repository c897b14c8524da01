"""Training criteria: the stage-1 composite alignment loss with its
regularizers, and the stage-2 full-sum wrapper.

Reduction convention everywhere: sum over frames, mean over utterances in a
batch, so learning rates keep their meaning across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TransducerModel
from .topology import fullsum


@dataclass
class LossWeights:
    label_smooth: float = 0.2
    boost_scale: float = 5.0
    focal_gamma: float = 1.0
    middle_scale: float = 0.3
    fs_aux_scale: float = 0.05
    clip_norm: float = 20.0


@dataclass
class Chunk:
    """50%-overlap training window plus the label history preceding it."""

    start: int  # subsampled frame units
    stop: int
    frames: tuple[int, ...]
    seed_history: tuple[int, ...]
    feat_start: int
    feat_stop: int


@dataclass
class StageResult:
    loss: float
    n_utts: int
    n_skipped: int
    grad_norm: float = 0.0
    clip_scale: float = 1.0
    mean_risk: float = 0.0


def viterbi_ce_loss(rows: np.ndarray, align_frames, label_smooth: float):
    """Label-smoothed frame-wise cross-entropy along a fixed alignment.

    loss = sum_t [(1-eps) * (-log p_t(y_t)) + eps/(V+1) * sum_v (-log p_t(v))]
    """
    T, V1 = rows.shape
    idx = np.asarray(align_frames)
    if idx.shape[0] != T:
        raise ValueError(f"alignment length {idx.shape[0]} != {T} rows")
    eps = label_smooth
    loss = -(1.0 - eps) * rows[np.arange(T), idx].sum() - (eps / V1) * rows.sum()
    grad = np.full_like(rows, -eps / V1)
    grad[np.arange(T), idx] -= 1.0 - eps
    return float(loss), grad


def boost_loss(rows: np.ndarray, align_frames, blank: int, boost_scale: float):
    """Un-smoothed CE restricted to non-blank frames, scaled by boost_scale."""
    T = rows.shape[0]
    idx = np.asarray(align_frames)
    mask = idx != blank
    grad = np.zeros_like(rows)
    ts = np.arange(T)[mask]
    loss = -boost_scale * rows[ts, idx[mask]].sum()
    grad[ts, idx[mask]] = -boost_scale
    return float(loss), grad


def encoder_aux_loss(rows: np.ndarray, align_frames, focal_gamma: float):
    """Focal-weighted frame CE against the aligned symbols (blanks included).

    Per frame: (1 - p_t)^gamma * (-log p_t) with p_t the predicted
    probability of the aligned symbol.
    """
    T = rows.shape[0]
    idx = np.asarray(align_frames)
    lp = rows[np.arange(T), idx]
    p = np.exp(lp)
    q = 1.0 - p
    w = q**focal_gamma
    loss = float((w * (-lp)).sum())
    grad = np.zeros_like(rows)
    if focal_gamma == 0.0:
        d = -np.ones(T)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = focal_gamma * p * (-lp) * q ** (focal_gamma - 1.0)
        extra = np.where(q == 0.0, 0.0, extra)
        d = -w - extra
    grad[np.arange(T), idx] = d
    return loss, grad


def chunk_utterance(features, align_frames, window_len: int, context_k: int, blank: int, subsample: int = 1):
    """Split an aligned utterance into 50%-overlap windows.

    Windows are taken in subsampled frame units; each carries the labels the
    alignment emits before its start so the prediction network can be seeded
    with true history.
    """
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    if window_len < 2 * context_k:
        raise ValueError(f"window_len {window_len} < 2 * context_k {context_k}")
    align_frames = tuple(align_frames)
    T = len(align_frames)
    raw_T = features.shape[0]
    stride = window_len // 2
    chunks = []
    start = 0
    while True:
        stop = min(start + window_len, T)
        prefix = tuple(f for f in align_frames[:start] if f != blank)
        chunks.append(
            Chunk(
                start=start,
                stop=stop,
                frames=align_frames[start:stop],
                seed_history=prefix[-context_k:],
                feat_start=start * subsample,
                feat_stop=min(stop * subsample, raw_T),
            )
        )
        if stop >= T:
            break
        start += stride
    return chunks


def clip_gradients(store, clip_norm: float):
    """Global-norm clipping; preserves direction exactly."""
    norm = store.grad_norm()
    scale = 1.0
    if np.isfinite(clip_norm) and norm > clip_norm:
        scale = clip_norm / norm
        store.scale_grads(scale)
    return norm, scale


def _stage1_piece(model, feats, frames, seed_history, weights, train_mode, seed, grad_scale):
    enc, ecache = model.encode(feats, train_mode=train_mode, dropout_seed=seed)
    rows, rcache = model.alignment_rows(enc, frames, seed_history)
    ce, d_rows = viterbi_ce_loss(rows, frames, weights.label_smooth)
    bl, d_boost = boost_loss(rows, frames, model.cfg.blank, weights.boost_scale)
    aux_f, fcache = model.aux_logprobs(enc, "final")
    lf, d_f = encoder_aux_loss(aux_f, frames, weights.focal_gamma)
    aux_m, mcache = model.aux_logprobs(enc, "middle")
    lm_, d_m = encoder_aux_loss(aux_m, frames, weights.focal_gamma)
    loss = ce + bl + lf + weights.middle_scale * lm_
    model.backward_and_accumulate(
        ecache,
        rows=(rcache, (d_rows + d_boost) * grad_scale),
        aux_final=(fcache, d_f * grad_scale),
        aux_middle=(mcache, weights.middle_scale * d_m * grad_scale),
    )
    return loss


def stage1_total(
    model: TransducerModel,
    batch,
    weights: LossWeights,
    *,
    train_mode: bool = True,
    dropout_seeds=None,
    chunk_window: int = 0,
    zero_grads: bool = True,
) -> StageResult:
    """Composite alignment loss over a batch: smoothed CE + both auxiliary
    encoder heads + boosted label CE, with global gradient-norm clipping.

    batch: list of (features, AlignmentPath-or-None). Utterances without an
    alignment are skipped and counted.
    """
    if zero_grads:
        model.store.zero_grads()
    n = len(batch)
    seeds = dropout_seeds if dropout_seeds is not None else [0] * n
    total = 0.0
    skipped = 0
    for (feats, align), seed in zip(batch, seeds):
        if align is None:
            skipped += 1
            continue
        if chunk_window:
            chunks = chunk_utterance(
                feats, align.frames, chunk_window, model.cfg.context_k, align.blank, model.cfg.subsample
            )
            for c in chunks:
                total += _stage1_piece(
                    model, feats[c.feat_start : c.feat_stop], c.frames, c.seed_history,
                    weights, train_mode, seed, 1.0 / n,
                )
        else:
            total += _stage1_piece(model, feats, align.frames, (), weights, train_mode, seed, 1.0 / n)
    norm, scale = clip_gradients(model.store, weights.clip_norm)
    return StageResult(loss=total / n, n_utts=n, n_skipped=skipped, grad_norm=norm, clip_scale=scale)


def stage2_fs_loss(
    model: TransducerModel,
    batch,
    *,
    train_mode: bool = True,
    dropout_seeds=None,
    grad_scale: float | None = None,
    zero_grads: bool = True,
) -> StageResult:
    """Negative full-sum log-probability, accumulated through the occupancy
    table. Utterances whose target cannot fit the subsampled frames are
    skipped and counted.

    grad_scale defaults to 1/len(batch); pass an explicit scale (and
    zero_grads=False) to accumulate several micro-batches into one update.
    """
    if zero_grads:
        model.store.zero_grads()
    n = len(batch)
    gs = grad_scale if grad_scale is not None else 1.0 / n
    seeds = dropout_seeds if dropout_seeds is not None else [0] * n
    total = 0.0
    skipped = 0
    for (feats, target), seed in zip(batch, seeds):
        enc, ecache = model.encode(feats, train_mode=train_mode, dropout_seed=seed)
        if len(target) > enc.h.shape[0]:
            skipped += 1
            continue
        lattice, lcache = model.joint_lattice(enc, target)
        res = fullsum(lattice, target)
        total += -res.log_prob
        model.backward_and_accumulate(ecache, lattice=(lcache, -res.occupancy * gs))
    return StageResult(loss=total * gs, n_utts=n, n_skipped=skipped, grad_norm=model.store.grad_norm())
