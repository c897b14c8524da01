"""Expected-risk training over static N-best lists with LM-aware posteriors.

The hypothesis posterior renormalizes (model * LM^lam1)^beta over the list:

    p_i = exp(beta * (m_i + lam1 * l_i)) / sum_j exp(beta * (m_j + lam1 * l_j))

with m the recomputed full-sum model score and l the frozen LM score. The
training loss is sum_i p_i * R_i (expected edit-distance risk) plus a small
full-sum stabilizer on the reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecodeConfig, beam_decode, lm_score_for_labels, words_and_pending
from .topology import LabelSeq, fullsum


@dataclass
class MbrScales:
    lam1: float
    beta: float | None = None  # defaults to 1/lam1
    fs_aux_scale: float = 0.05

    def __post_init__(self):
        if self.lam1 <= 0:
            raise ValueError("lam1 must be positive")
        if self.beta is None:
            self.beta = 1.0 / self.lam1
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class NBestEntry:
    labels: LabelSeq
    lm_logprob: float
    is_ref: bool = False
    model_logprob: float | None = None
    risk: int | None = None


@dataclass
class NBestList:
    utt_id: str
    entries: list[NBestEntry]
    ref_index: int


@dataclass
class EditStats:
    distance: int
    sub: int
    dele: int
    ins: int


def levenshtein(ref, hyp) -> EditStats:
    """Minimal edit distance with operation decomposition.

    Backtrace ties prefer substitution over deletion over insertion.
    """
    ref, hyp = tuple(ref), tuple(hyp)
    R, H = len(ref), len(hyp)
    d = np.zeros((R + 1, H + 1), dtype=int)
    d[:, 0] = np.arange(R + 1)
    d[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub_cost = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub_cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = R, H
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditStats(distance=int(d[R, H]), sub=sub, dele=dele, ins=ins)


def _posterior_vector(model_logprobs, lm_logprobs, scales: MbrScales) -> np.ndarray:
    z = scales.beta * (np.asarray(model_logprobs, dtype=float) + scales.lam1 * np.asarray(lm_logprobs, dtype=float))
    m = z.max()
    if not np.isfinite(m):
        raise ValueError("no finite hypothesis score in the list")
    e = np.exp(z - m)
    return e / e.sum()


def seq_posteriors(entries, scales: MbrScales) -> np.ndarray:
    """Renormalized sequence posteriors over an N-best list."""
    if not entries:
        raise ValueError("empty N-best list")
    return _posterior_vector([e.model_logprob for e in entries], [e.lm_logprob for e in entries], scales)


def mbr_loss(nbest: NBestList, scales: MbrScales):
    """Expected risk and its gradient w.r.t. each entry's model score:

    d loss / d m_i = beta * p_i * (R_i - loss)
    """
    if not nbest.entries:
        raise ValueError(f"{nbest.utt_id}: empty N-best list")
    p = seq_posteriors(nbest.entries, scales)
    risks = np.asarray([e.risk for e in nbest.entries], dtype=float)
    loss = float(p @ risks)
    grad = scales.beta * p * (risks - loss)
    return loss, grad


def stage3_total(
    model,
    batch,
    scales: MbrScales,
    *,
    train_mode: bool = True,
    dropout_seeds=None,
    grad_scale: float | None = None,
    zero_grads: bool = True,
):
    """Expected risk plus the reference full-sum stabilizer, backpropagated
    through the full-sum occupancies of every hypothesis.

    batch: list of (features, NBestList) with risks populated. Returns a
    (loss, mean expected risk, n_skipped) triple; gradients are accumulated
    into the model's ParamStore.
    """
    if zero_grads:
        model.store.zero_grads()
    n = len(batch)
    gs = grad_scale if grad_scale is not None else 1.0 / n
    seeds = dropout_seeds if dropout_seeds is not None else [0] * n
    total = 0.0
    risk_sum = 0.0
    skipped = 0
    for (feats, nbest), seed in zip(batch, seeds):
        if not nbest.entries:
            raise ValueError(f"{nbest.utt_id}: empty N-best list")
        enc, ecache = model.encode(feats, train_mode=train_mode, dropout_seed=seed)
        caches, occs, m = [], [], []
        for e in nbest.entries:
            if len(e.labels) > enc.h.shape[0]:
                caches.append(None)
                occs.append(None)
                m.append(-np.inf)
                continue
            lattice, lcache = model.joint_lattice(enc, e.labels)
            res = fullsum(lattice, e.labels)
            caches.append(lcache)
            occs.append(res.occupancy)
            m.append(res.log_prob)
        if not np.isfinite(m[nbest.ref_index]):
            skipped += 1
            continue
        p = _posterior_vector(m, [e.lm_logprob for e in nbest.entries], scales)
        risks = np.asarray([e.risk for e in nbest.entries], dtype=float)
        expected = float(p @ risks)
        coeff = scales.beta * p * (risks - expected)
        coeff[nbest.ref_index] -= scales.fs_aux_scale
        total += expected + scales.fs_aux_scale * (-m[nbest.ref_index])
        risk_sum += expected
        consumers = [
            (caches[i], coeff[i] * occs[i] * gs)
            for i in range(len(nbest.entries))
            if caches[i] is not None and coeff[i] != 0.0
        ]
        model.backward_and_accumulate(ecache, lattice=consumers)
    return total * gs, risk_sum / max(n - skipped, 1), skipped


def expected_risk(model, batch, scales: MbrScales) -> float:
    """Mean expected risk of the lists under the current model (no gradients)."""
    risk_sum = 0.0
    n = 0
    for feats, nbest in batch:
        enc, _ = model.encode(feats, train_mode=False)
        m = []
        for e in nbest.entries:
            if len(e.labels) > enc.h.shape[0]:
                m.append(-np.inf)
                continue
            lattice, _ = model.joint_lattice(enc, e.labels)
            m.append(fullsum(lattice, e.labels).log_prob)
        if not np.isfinite(m[nbest.ref_index]):
            continue
        p = _posterior_vector(m, [e.lm_logprob for e in nbest.entries], scales)
        risks = np.asarray([e.risk for e in nbest.entries], dtype=float)
        risk_sum += float(p @ risks)
        n += 1
    return risk_sum / max(n, 1)


# --------------------------------------------------------- N-best generation


@dataclass
class NBestStore:
    n_best: int
    lam1: float
    seed: int
    lists: dict[str, list[NBestEntry]] = field(default_factory=dict)


def build_static_nbest(
    utterances,
    model,
    lm,
    lam1: float,
    n_best: int = 4,
    subset_fraction: float = 0.25,
    seed: int = 0,
    max_T: int | None = None,
    max_S: int | None = None,
    beam_size: int = 8,
    w_mapping: dict | None = None,
) -> NBestStore:
    """Shallow-fusion decode a seeded random subset of the data and persist
    deduplicated hypotheses with frozen LM scores.

    Up to 2 * n_best raw beam outputs are kept per utterance so the list size
    can later be increased without re-decoding; the reference is always
    stored (flagged). Model scores are left for training-time recomputation.
    """
    eligible = [
        u for u in utterances
        if (max_T is None or u.T <= max_T) and (max_S is None or u.S <= max_S)
    ]
    rng = np.random.default_rng(seed)
    count = int(round(subset_fraction * len(eligible)))
    chosen = sorted(rng.choice(len(eligible), size=count, replace=False)) if count else []
    keep = 2 * n_best
    cfg = DecodeConfig(lam1=lam1, lam2=0.0, beam_size=beam_size, n_best=keep, w_mapping=w_mapping)
    store = NBestStore(n_best=n_best, lam1=lam1, seed=seed)
    for idx in chosen:
        u = eligible[idx]
        try:
            hyps = beam_decode(model, lm, u.feats, cfg)
        except Exception as exc:  # noqa: BLE001 - decode failures skip the utterance
            warnings.warn(f"{u.id}: decode failed ({exc}), skipped")
            continue
        ref = tuple(u.labels)
        entries = [
            NBestEntry(labels=h.labels, lm_logprob=lm_score_for_labels(lm, h.labels, w_mapping),
                       is_ref=h.labels == ref)
            for h in hyps
        ]
        if not any(e.is_ref for e in entries):
            entries.append(
                NBestEntry(labels=ref, lm_logprob=lm_score_for_labels(lm, ref, w_mapping), is_ref=True)
            )
        store.lists[u.id] = entries
    return store


def load_for_training(store: NBestStore, utterances, n: int | None = None, w_mapping: dict | None = None):
    """Materialize training lists: truncate to n entries (reference always
    kept, dynamic N when fewer are stored) and compute edit-distance risks
    on the mapped word sequences."""
    n = n or store.n_best
    by_id = {u.id: u for u in utterances}
    batch = []
    for utt_id in store.lists:
        raw = store.lists[utt_id]
        ref_pos = next(i for i, e in enumerate(raw) if e.is_ref)
        kept = list(raw[:n])
        if ref_pos >= n:
            kept[-1] = raw[ref_pos]
        ref_idx = next(i for i, e in enumerate(kept) if e.is_ref)
        ref_words, _ = words_and_pending(kept[ref_idx].labels, w_mapping)
        entries = []
        for e in kept:
            words, _ = words_and_pending(e.labels, w_mapping)
            entries.append(
                NBestEntry(labels=e.labels, lm_logprob=e.lm_logprob, is_ref=e.is_ref,
                           risk=levenshtein(ref_words, words).distance)
            )
        batch.append((by_id[utt_id].feats, NBestList(utt_id=utt_id, entries=entries, ref_index=ref_idx)))
    return batch


# ------------------------------------------------------------- store format


def write_nbest(path, store: NBestStore):
    lines = [f"#nbest v1 N={store.n_best} lambda1={'%.17g' % store.lam1} seed={store.seed}"]
    for utt_id in store.lists:
        entries = store.lists[utt_id]
        lines.append(f"utt {utt_id} {len(entries)}")
        for e in entries:
            tag = "ref" if e.is_ref else "hyp"
            toks = " ".join(str(x) for x in e.labels)
            lines.append(f"{tag} {'%.17g' % e.lm_logprob} {len(e.labels)} {toks}".rstrip())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_nbest(path) -> NBestStore:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != "#nbest" or head[1] != "v1":
        raise ValueError(f"{path}: unrecognized N-best header")
    fields = dict(part.split("=", 1) for part in head[2:])
    store = NBestStore(n_best=int(fields["N"]), lam1=float(fields["lambda1"]), seed=int(fields["seed"]))
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] != "utt":
            raise ValueError(f"{path}: expected utt line, got {lines[i]!r}")
        utt_id, count = parts[1], int(parts[2])
        entries = []
        for j in range(count):
            p = lines[i + 1 + j].split()
            S = int(p[2])
            entries.append(
                NBestEntry(labels=tuple(int(x) for x in p[3 : 3 + S]), lm_logprob=float(p[1]),
                           is_ref=p[0] == "ref")
            )
        store.lists[utt_id] = entries
        i += 1 + count
    return store
