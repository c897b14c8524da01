"""Count-based n-gram language model with absolute discounting and backoff.

Tokens are strings; sentence-begin/end markers and the unknown token are
reserved. Probabilities are stored canonically as base-10 logs (like the
text exchange format) and converted to natural logs at query time, so the
writer/reader round trip is bit-exact.

For a seen context c with total count N, K seen continuations and discount d:

    P(w|c) = (count(c,w) - d) / N                     for seen w
    P(w|c) = bow(c) * P(w|c')                         otherwise

    bow(c) = (d * K / N) / (1 - sum_{seen w} P(w|c'))

where c' drops the oldest context token. A context whose continuations cover
the whole prediction vocabulary falls back to plain relative frequencies, so
every observed context sums to one either way. The unigram level spreads its
discounted mass uniformly over the prediction vocabulary, which keeps every
in-vocabulary token (and the unknown token, for d > 0) reachable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

LN10 = math.log(10.0)
BOS, EOS, UNK = "<s>", "</s>", "<unk>"
NEG_INF = float("-inf")


@dataclass
class NgramModel:
    order: int
    logprob: dict[tuple[str, ...], float] = field(default_factory=dict)  # log10 P(gram[-1] | gram[:-1])
    backoff: dict[tuple[str, ...], float] = field(default_factory=dict)  # log10 backoff weight per context
    vocab: tuple[str, ...] = ()  # prediction vocabulary (sorted; includes </s> and <unk>, never <s>)

    def __post_init__(self):
        self._vocab_set = set(self.vocab)

    def map_token(self, token) -> str:
        token = str(token)
        return token if token in self._vocab_set else UNK

    def initial_context(self) -> tuple[str, ...]:
        return (BOS,) * (self.order - 1)

    def cond_log10(self, token: str, context: tuple[str, ...]) -> float:
        key = context + (token,)
        if key in self.logprob:
            return self.logprob[key]
        if not context:
            return NEG_INF
        bow = self.backoff.get(context, 0.0)
        return bow + self.cond_log10(token, context[1:])

    def step(self, context: tuple[str, ...], token) -> tuple[float, tuple[str, ...]]:
        """Natural-log conditional probability plus the successor context."""
        tok = self.map_token(token)
        lp = self.cond_log10(tok, context) * LN10
        if self.order == 1:
            return lp, ()
        return lp, (context + (tok,))[-(self.order - 1) :]


def score(model: NgramModel, tokens) -> float:
    """Natural-log probability of the sequence including the end marker."""
    ctx = model.initial_context()
    total = 0.0
    for tok in tokens:
        lp, ctx = model.step(ctx, tok)
        total += lp
    total += model.step(ctx, EOS)[0]
    return total


def perplexity(model: NgramModel, sentences) -> float:
    total, n = 0.0, 0
    for sent in sentences:
        total += score(model, sent)
        n += len(sent) + 1
    return math.exp(-total / n)


def train_ngram(corpus, order: int, discount: float = 0.4) -> NgramModel:
    """Counts with absolute discounting and backoff; deterministic given the
    corpus order. corpus: iterable of token sequences."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must be in [0, 1)")
    sentences = [tuple(str(t) for t in sent) for sent in corpus]
    if not sentences:
        raise ValueError("empty corpus")

    counts: list[dict] = [dict() for _ in range(order + 1)]
    for sent in sentences:
        for k in range(1, order + 1):
            seq = (BOS,) * (k - 1) + sent + (EOS,)
            for i in range(k - 1, len(seq)):
                gram = seq[i - k + 1 : i + 1]
                counts[k][gram] = counts[k].get(gram, 0) + 1

    words = sorted({t for sent in sentences for t in sent} | {EOS, UNK})
    vocab = tuple(words)
    model = NgramModel(order=order, vocab=vocab)

    # unigrams: discounted mass goes to a uniform share of the whole vocabulary
    total1 = sum(counts[1].values())
    types1 = len(counts[1])
    uniform_share = discount * types1 / total1 / len(vocab)
    for w in vocab:
        p = max(counts[1].get((w,), 0) - discount, 0.0) / total1 + uniform_share
        model.logprob[(w,)] = math.log10(p) if p > 0 else NEG_INF

    for k in range(2, order + 1):
        by_ctx: dict[tuple, dict[str, int]] = {}
        for gram, c in counts[k].items():
            by_ctx.setdefault(gram[:-1], {})[gram[-1]] = c
        for ctx in sorted(by_ctx):
            cont = by_ctx[ctx]
            tot = sum(cont.values())
            if len(cont) == len(vocab):
                # saturated context: relative frequencies, nothing to back off to
                for w, c in cont.items():
                    model.logprob[ctx + (w,)] = math.log10(c / tot)
                continue
            for w, c in cont.items():
                model.logprob[ctx + (w,)] = math.log10((c - discount) / tot) if c > discount else NEG_INF
            leftover = discount * len(cont) / tot
            if leftover == 0.0:
                model.backoff[ctx] = NEG_INF
                continue
            seen_lower = sum(10.0 ** model.cond_log10(w, ctx[1:]) for w in sorted(cont))
            model.backoff[ctx] = math.log10(leftover / (1.0 - seen_lower))

    # placeholder entries so every backoff context also appears as a gram
    for k in range(1, order):
        ctx = (BOS,) * k
        if ctx in model.backoff and ctx not in model.logprob:
            model.logprob[ctx] = NEG_INF
    return model


def weaker_model(corpus, order: int, discount: float = 0.4) -> NgramModel:
    """Same corpus, order reduced by one (floor at unigram)."""
    return train_ngram(corpus, max(order - 1, 1), discount)


# ----------------------------------------------------------------- text format


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_ngram(path, model: NgramModel):
    """Textual exchange format: per-order counts, then `logprob tokens [backoff]`
    lines in base-10 logs."""
    grams_by_order: dict[int, list] = {}
    for gram in model.logprob:
        grams_by_order.setdefault(len(gram), []).append(gram)
    lines = [f"#ngram v1 order={model.order}", "", "\\data\\"]
    for k in range(1, model.order + 1):
        lines.append(f"ngram {k}={len(grams_by_order.get(k, []))}")
    for k in range(1, model.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        for gram in sorted(grams_by_order.get(k, [])):
            parts = [_fmt(model.logprob[gram]), " ".join(gram)]
            if gram in model.backoff:
                parts.append(_fmt(model.backoff[gram]))
            lines.append("\t".join(parts))
    lines += ["", "\\end\\", ""]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def read_ngram(path) -> NgramModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#ngram v1"):
        raise ValueError(f"{path}: unrecognized LM header")
    order = int(lines[0].split("order=")[1])
    model = NgramModel(order=order)
    vocab = set()
    current = 0
    for line in lines[1:]:
        if not line or line == "\\data\\" or line.startswith("ngram "):
            continue
        if line == "\\end\\":
            break
        if line.endswith("-grams:"):
            current = int(line[1:].split("-")[0])
            continue
        parts = line.split("\t")
        gram = tuple(parts[1].split(" "))
        if len(gram) != current:
            raise ValueError(f"{path}: gram {gram} in wrong section")
        model.logprob[gram] = float(parts[0])
        if len(parts) > 2:
            model.backoff[gram] = float(parts[2])
        if current == 1 and gram[0] != BOS:
            vocab.add(gram[0])
    model.vocab = tuple(sorted(vocab))
    model.__post_init__()
    return model
