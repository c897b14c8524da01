"""Time-synchronous beam search with shallow fusion and ILM correction,
plus an exhaustive-search oracle.

Combined hypothesis score (log domain):

    transducer + lam1 * lm - lam2 * ilm

LM and ILM terms apply on label emissions only; blank advances time without
any prior cost. lam2 = 0 recovers plain shallow fusion; lam1 = 0 skips LM
scoring entirely (its component stays 0), so decoding is then independent of
the LM object. Hypotheses with identical label sequences are merged with
log-sum-exp on the transducer score. Pruning keeps the top beam_size by
combined score (histogram pruning).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import EOS, NgramModel

EXHAUSTIVE_LIMIT = 10**6


@dataclass
class DecodeConfig:
    lam1: float = 0.0
    lam2: float = 0.0
    beam_size: int = 8
    n_best: int = 1
    w_mapping: dict | None = None  # None = identity, else {label tuple: word}

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    transducer: float
    lm: float
    ilm: float
    combined: float


@dataclass
class _Beam:
    trans: float
    lm: float
    ilm: float
    lm_ctx: tuple
    pending: tuple


def words_and_pending(labels, w_mapping):
    """Map labels to words; with a lexicon, a word completes whenever the
    pending label buffer equals an entry (lexica are assumed prefix-free).
    Returns the completed words and any unconsumed trailing labels."""
    if w_mapping is None:
        return tuple(labels), ()
    words, pending = [], []
    for lab in labels:
        pending.append(lab)
        if tuple(pending) in w_mapping:
            words.append(w_mapping[tuple(pending)])
            pending = []
    return tuple(words), tuple(pending)


def apply_w_mapping(labels, w_mapping):
    """Identity, or lexicon lookup-and-concatenate; unmapped labels error."""
    words, pending = words_and_pending(labels, w_mapping)
    if pending:
        raise ValueError(f"labels {pending} do not complete any lexicon entry")
    return words


def lm_score_for_labels(lm: NgramModel, labels, w_mapping) -> float:
    """Stepwise LM score of the mapped word sequence including the end marker
    (trailing partial lexicon matches contribute nothing)."""
    words, _ = words_and_pending(labels, w_mapping)
    ctx = lm.initial_context()
    total = 0.0
    for w in words:
        lp, ctx = lm.step(ctx, w)
        total += lp
    return total + lm.step(ctx, EOS)[0]


def _combined(trans, lm_score, ilm_score, cfg) -> float:
    total = trans
    if cfg.lam1 != 0.0:
        total = total + cfg.lam1 * lm_score
    if cfg.lam2 != 0.0:
        total = total - cfg.lam2 * ilm_score
    return total


def _rank_key(labels, combined):
    return (-combined, labels)


def _empty_hypothesis(lm, cfg) -> Hypothesis:
    lm_score = lm_score_for_labels(lm, (), cfg.w_mapping) if cfg.lam1 != 0.0 else 0.0
    return Hypothesis(labels=(), transducer=0.0, lm=lm_score, ilm=0.0,
                      combined=_combined(0.0, lm_score, 0.0, cfg))


def beam_decode(model, lm, features, cfg: DecodeConfig) -> list[Hypothesis]:
    """Frame-synchronous search over the monotonic topology.

    Each frame every hypothesis either emits blank (time advances, no prior
    terms) or one label (transducer + LM + ILM increments), then the beam is
    pruned to beam_size by combined score.
    """
    features = np.asarray(features)
    if features.size == 0:
        return [_empty_hypothesis(lm, cfg)]
    enc, _ = model.encode(features, train_mode=False)
    V = model.cfg.V
    blank = model.cfg.blank

    beams: dict[tuple, _Beam] = {
        (): _Beam(trans=0.0, lm=0.0, ilm=0.0, lm_ctx=lm.initial_context(), pending=())
    }
    ilm_memo: dict[tuple, np.ndarray] = {}

    def ilm_row(hist):
        if hist not in ilm_memo:
            ilm_memo[hist] = model.ilm_label_logprobs(hist)
        return ilm_memo[hist]

    for t in range(enc.h.shape[0]):
        row_memo: dict[tuple, np.ndarray] = {}
        new: dict[tuple, _Beam] = {}
        for labels, hyp in beams.items():
            hist = model.history_for(labels)
            if hist not in row_memo:
                row_memo[hist] = model.step_logprobs(enc.h[t], hist)
            lp = row_memo[hist]

            stay = new.get(labels)
            if stay is None:
                new[labels] = _Beam(hyp.trans + lp[blank], hyp.lm, hyp.ilm, hyp.lm_ctx, hyp.pending)
            else:
                stay.trans = np.logaddexp(stay.trans, hyp.trans + lp[blank])

            for v in range(V):
                ext = labels + (v,)
                lm_score, lm_ctx, pending = hyp.lm, hyp.lm_ctx, hyp.pending
                if cfg.lam1 != 0.0:
                    if cfg.w_mapping is None:
                        inc, lm_ctx = lm.step(lm_ctx, str(v))
                        lm_score = lm_score + inc
                    else:
                        pending = pending + (v,)
                        if pending in cfg.w_mapping:
                            inc, lm_ctx = lm.step(lm_ctx, cfg.w_mapping[pending])
                            lm_score = lm_score + inc
                            pending = ()
                ilm_score = hyp.ilm + ilm_row(hist)[v] if cfg.lam2 != 0.0 else 0.0
                cand = new.get(ext)
                if cand is None:
                    new[ext] = _Beam(hyp.trans + lp[v], lm_score, ilm_score, lm_ctx, pending)
                else:
                    cand.trans = np.logaddexp(cand.trans, hyp.trans + lp[v])
        ranked = sorted(new.items(), key=lambda kv: _rank_key(kv[0], _combined(kv[1].trans, kv[1].lm, kv[1].ilm, cfg)))
        beams = dict(ranked[: cfg.beam_size])

    final = []
    for labels, hyp in beams.items():
        lm_score = hyp.lm
        if cfg.lam1 != 0.0:
            lm_score = lm_score + lm.step(hyp.lm_ctx, EOS)[0]
        final.append(
            Hypothesis(
                labels=labels,
                transducer=float(hyp.trans),
                lm=float(lm_score),
                ilm=float(hyp.ilm),
                combined=float(_combined(hyp.trans, lm_score, hyp.ilm, cfg)),
            )
        )
    final.sort(key=lambda h: _rank_key(h.labels, h.combined))
    return final[: cfg.n_best]


def exhaustive_decode(model, lm, features, cfg: DecodeConfig) -> Hypothesis:
    """Enumerate every alignment sequence, aggregate per label sequence, and
    apply the MAP scoring rule exactly. Oracle for small instances only."""
    features = np.asarray(features)
    if features.size == 0:
        return _empty_hypothesis(lm, cfg)
    T = features.shape[0]
    V = model.cfg.V
    enc, _ = model.encode(features, train_mode=False)
    T_out = enc.h.shape[0]
    if (V + 1) ** T_out > EXHAUSTIVE_LIMIT:
        raise ValueError(f"alignment space (V+1)^T = {(V + 1) ** T_out} exceeds {EXHAUSTIVE_LIMIT}")
    blank = model.cfg.blank

    row_memo: dict[tuple, np.ndarray] = {}

    def row(t, hist):
        if (t, hist) not in row_memo:
            row_memo[(t, hist)] = model.step_logprobs(enc.h[t], hist)
        return row_memo[(t, hist)]

    agg: dict[tuple, float] = {}

    def walk(t, labels, acc):
        if t == T_out:
            agg[labels] = np.logaddexp(agg[labels], acc) if labels in agg else acc
            return
        lp = row(t, model.history_for(labels))
        walk(t + 1, labels, acc + lp[blank])
        for v in range(V):
            walk(t + 1, labels + (v,), acc + lp[v])

    walk(0, (), 0.0)

    ilm_memo: dict[tuple, np.ndarray] = {}

    def ilm_total(labels):
        total = 0.0
        for s, v in enumerate(labels):
            hist = model.history_for(labels[:s])
            if hist not in ilm_memo:
                ilm_memo[hist] = model.ilm_label_logprobs(hist)
            total += ilm_memo[hist][v]
        return total

    best = None
    best_key = None
    for labels in agg:
        trans = agg[labels]
        lm_score = lm_score_for_labels(lm, labels, cfg.w_mapping) if cfg.lam1 != 0.0 else 0.0
        ilm_score = ilm_total(labels) if cfg.lam2 != 0.0 else 0.0
        combined = _combined(trans, lm_score, ilm_score, cfg)
        key = _rank_key(labels, combined)
        if best_key is None or key < best_key:
            best_key = key
            best = Hypothesis(labels=labels, transducer=float(trans), lm=float(lm_score),
                              ilm=float(ilm_score), combined=float(combined))
    return best


# ------------------------------------------------------------- output format


def format_decode_lines(utt_id: str, hyps) -> list[str]:
    lines = []
    for rank, h in enumerate(hyps, start=1):
        nums = " ".join("%.17g" % x for x in (h.combined, h.transducer, h.lm, h.ilm))
        labels = " ".join(str(x) for x in h.labels)
        lines.append(f"utt {utt_id} {rank} {nums} | {labels}".rstrip())
    return lines


def parse_decode_line(line: str):
    head, _, tail = line.partition(" |")
    parts = head.split()
    if parts[0] != "utt":
        raise ValueError(f"bad decode line: {line!r}")
    labels = tuple(int(x) for x in tail.split()) if tail.strip() else ()
    return parts[1], int(parts[2]), Hypothesis(
        labels=labels,
        combined=float(parts[3]),
        transducer=float(parts[4]),
        lm=float(parts[5]),
        ilm=float(parts[6]),
    )
