"""Backoff n-gram language model: training with interpolated Kneser-Ney
smoothing, ARPA file I/O, count-cutoff pruning, and hypothesis scoring.

Internally all probabilities are natural-log; ARPA files use base-10 logs
in a canonical form (entries sorted per order, 7 significant digits) so
that write -> read -> write is bit-exact.
"""

from __future__ import annotations

import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import (
    ConfigError,
    DataError,
    Hypothesis,
    NBestList,
    SENT_BEGIN,
    SENT_END,
    Token,
    UNK_WORD,
    Vocabulary,
)

LN10 = math.log(10.0)
LOG10_ZERO = -99.0  # SRILM convention for "no probability" entries
MIN_DISCOUNT = 0.1
DEFAULT_UNK_FLOOR = 1e-7

Gram = tuple[str, ...]


@dataclass
class NGramModel:
    """Backoff tables per order: gram -> natural-log prob, context -> ln backoff.

    ``counts`` holds the regular training counts (kept for count-cutoff
    pruning); models read from ARPA files have none.
    """

    order: int
    logprob: list[dict[Gram, float]]
    backoff: list[dict[Gram, float]]
    vocab: Vocabulary
    counts: list[dict[Gram, int]] | None = None

    def predicted_words(self) -> list[str]:
        """Symbols with probability mass: everything except sentence-begin."""
        return sorted(w for w in self.vocab.words if w != SENT_BEGIN)

    def map_word(self, word: str) -> str:
        return word if word in self.vocab.words else UNK_WORD


def _surfaces(sentence: Sequence) -> list[str]:
    return [t.surface if isinstance(t, Token) else str(t) for t in sentence]


def _count_ngrams(sentences: Iterable[Sequence], order: int) -> tuple[list[dict[Gram, int]], int]:
    counts: list[dict[Gram, int]] = [defaultdict(int) for _ in range(order)]
    n_sentences = 0
    for sentence in sentences:
        words = [SENT_BEGIN] + _surfaces(sentence) + [SENT_END]
        n_sentences += 1
        for k in range(1, order + 1):
            for i in range(len(words) - k + 1):
                gram = tuple(words[i : i + k])
                if gram[-1] == SENT_BEGIN and k > 1:
                    continue
                counts[k - 1][gram] += 1
    return [dict(c) for c in counts], n_sentences


def _modified_counts(counts: list[dict[Gram, int]], k: int) -> dict[Gram, int]:
    """Continuation counts N1+(. g) at order k; grams starting with the
    sentence-begin symbol keep their regular counts (nothing precedes it)."""
    predecessors: dict[Gram, set[str]] = defaultdict(set)
    for gram in counts[k]:  # order k+1 grams
        predecessors[gram[1:]].add(gram[0])
    out = {}
    for gram, c in counts[k - 1].items():
        if gram[0] == SENT_BEGIN:
            out[gram] = c
        else:
            out[gram] = len(predecessors.get(gram, ()))
    return out


def _kn_discount(table: Mapping[Gram, int]) -> float:
    n1 = sum(1 for c in table.values() if c == 1)
    n2 = sum(1 for c in table.values() if c == 2)
    if n1 + 2 * n2 == 0:
        return MIN_DISCOUNT
    return max(n1 / (n1 + 2 * n2), MIN_DISCOUNT)


def train_ngram(
    corpus: Iterable[Sequence],
    order: int,
    smoothing: str = "kneser_ney",
    cutoffs: Mapping[int, int] | None = None,
    unk_floor: float = DEFAULT_UNK_FLOOR,
) -> NGramModel:
    """Estimate a backoff model from an iterable of token sequences.

    smoothing: "kneser_ney" (interpolated, one discount per order from
    count-of-count statistics), "add_one", or "mle" (top-order relative
    frequencies, no smoothing; unseen events get -inf).
    """
    if not 1 <= order <= 4:
        raise ConfigError(f"order must be in [1, 4], got {order}")
    counts, n_sentences = _count_ngrams(corpus, order)
    if n_sentences == 0 or not counts[0]:
        raise DataError("empty training corpus")
    if order > 1 and not counts[order - 1]:
        raise DataError(f"corpus has no {order}-grams; corpus smaller than model order")

    words = sorted(g[0] for g in counts[0])
    vocab_words = set(words) | {SENT_BEGIN, SENT_END, UNK_WORD}
    predicted = sorted(vocab_words - {SENT_BEGIN})
    unigram_counts = {w: counts[0].get((w,), 0) for w in predicted}
    vocab = Vocabulary(words=frozenset(vocab_words), counts={w: c for w, c in unigram_counts.items() if w != UNK_WORD})

    if smoothing == "kneser_ney":
        model = _estimate_kneser_ney(counts, order, predicted, vocab, unk_floor)
    elif smoothing == "add_one":
        model = _estimate_add_one(counts, order, predicted, vocab)
    elif smoothing == "mle":
        model = _estimate_mle(counts, order, predicted, vocab)
    else:
        raise ConfigError(f"unknown smoothing {smoothing!r}")

    if cutoffs:
        model = prune_ngram(model, cutoffs)
    return model


def _estimate_kneser_ney(
    counts: list[dict[Gram, int]],
    order: int,
    predicted: list[str],
    vocab: Vocabulary,
    unk_floor: float,
) -> NGramModel:
    # Counting table per order: regular counts at the top, continuation
    # counts below.
    tables: list[dict[Gram, int]] = [dict() for _ in range(order)]
    tables[order - 1] = dict(counts[order - 1])
    for k in range(1, order):
        tables[k - 1] = _modified_counts(counts, k)

    mass = {w: tables[0].get((w,), 0) for w in predicted}
    discounts = [_kn_discount(mass)] + [_kn_discount(tables[k]) for k in range(1, order)]

    # Unigram distribution over the predicted vocabulary.
    p_uniform = 1.0 / len(predicted)
    d1 = discounts[0]
    total = sum(mass.values())
    if total == 0:
        raise DataError("degenerate corpus: no countable unigrams")
    gamma1 = sum(min(c, d1) for c in mass.values()) / total
    unigram = {w: max(c - d1, 0.0) / total + gamma1 * p_uniform for w, c in mass.items()}
    if unigram[UNK_WORD] < unk_floor:
        scale = (1.0 - unk_floor) / (1.0 - unigram[UNK_WORD])
        unigram = {w: (unk_floor if w == UNK_WORD else p * scale) for w, p in unigram.items()}

    prob: list[dict[Gram, float]] = [dict() for _ in range(order)]
    bow: list[dict[Gram, float]] = [dict() for _ in range(order)]
    prob[0] = {(w,): p for w, p in unigram.items()}
    prob[0][(SENT_BEGIN,)] = math.pow(10.0, LOG10_ZERO)

    for k in range(2, order + 1):
        table = tables[k - 1]
        d = discounts[k - 1]
        by_context: dict[Gram, list[tuple[str, int]]] = defaultdict(list)
        for gram, c in table.items():
            by_context[gram[:-1]].append((gram[-1], c))
        for context, items in by_context.items():
            denom = sum(c for _, c in items)
            if denom == 0:
                continue
            gamma = sum(min(c, d) for _, c in items) / denom
            bow[k - 2][context] = gamma
            for w, c in items:
                lower = prob[k - 2][context[1:] + (w,)] if k > 2 else prob[0][(w,)]
                prob[k - 1][context + (w,)] = max(c - d, 0.0) / denom + gamma * lower

    return _model_from_linear(order, prob, bow, vocab, counts)


def _estimate_add_one(counts, order, predicted, vocab) -> NGramModel:
    v = len(predicted)
    prob: list[dict[Gram, float]] = [dict() for _ in range(order)]
    bow: list[dict[Gram, float]] = [dict() for _ in range(order)]
    for k in range(1, order + 1):
        by_context: dict[Gram, list[tuple[str, int]]] = defaultdict(list)
        for gram, c in counts[k - 1].items():
            if gram[-1] == SENT_BEGIN:
                continue
            by_context[gram[:-1]].append((gram[-1], c))
        for context, items in by_context.items():
            denom = sum(c for _, c in items)
            for w, c in items:
                prob[k - 1][context + (w,)] = (c + 1.0) / (denom + v)
    prob[0][(SENT_BEGIN,)] = math.pow(10.0, LOG10_ZERO)
    # Unseen unigrams still need mass so backoff terminates.
    total = sum(counts[0].get((w,), 0) for w in predicted)
    for w in predicted:
        prob[0].setdefault((w,), 1.0 / (total + v))
    _recompute_backoffs(order, prob, bow)
    return _model_from_linear(order, prob, bow, vocab, counts)


def _estimate_mle(counts, order, predicted, vocab) -> NGramModel:
    prob: list[dict[Gram, float]] = [dict() for _ in range(order)]
    bow: list[dict[Gram, float]] = [dict() for _ in range(order)]
    for k in range(1, order + 1):
        by_context: dict[Gram, list[tuple[str, int]]] = defaultdict(list)
        for gram, c in counts[k - 1].items():
            if gram[-1] == SENT_BEGIN:
                continue
            by_context[gram[:-1]].append((gram[-1], c))
        for context, items in by_context.items():
            denom = sum(c for _, c in items)
            for w, c in items:
                prob[k - 1][context + (w,)] = c / denom
    prob[0][(SENT_BEGIN,)] = math.pow(10.0, LOG10_ZERO)
    prob[0].setdefault((UNK_WORD,), 0.0)
    return _model_from_linear(order, prob, bow, vocab, counts)


def _linear_lookup(prob: list[dict[Gram, float]], bow: list[dict[Gram, float]], ctx: Gram, w: str) -> float:
    p = prob[len(ctx)].get(ctx + (w,))
    if p is not None:
        return p
    if not ctx:
        return prob[0].get((w,), 0.0)
    return bow[len(ctx) - 1].get(ctx, 1.0) * _linear_lookup(prob, bow, ctx[1:], w)


def _recompute_backoffs(order: int, prob: list[dict[Gram, float]], bow: list[dict[Gram, float]]) -> None:
    """Set each context's backoff weight so the conditional sums to one.

    gamma(h) = (1 - sum_seen p(w|h)) / (1 - sum_seen p_lower(w|h[1:])),
    where p_lower is evaluated through the backoff chain: after pruning, a
    kept gram's suffix entry may itself be gone. Ascending order keeps the
    lower tables final by the time they are read.
    """
    for k in range(2, order + 1):
        by_context: dict[Gram, list[str]] = defaultdict(list)
        for gram in prob[k - 1]:
            by_context[gram[:-1]].append(gram[-1])
        bow[k - 2].clear()
        for context, ws in by_context.items():
            seen = sum(prob[k - 1][context + (w,)] for w in ws)
            seen_lower = sum(_linear_lookup(prob, bow, context[1:], w) for w in ws)
            num = max(1.0 - seen, 0.0)
            den = 1.0 - seen_lower
            bow[k - 2][context] = num / den if den > 1e-15 else 1.0


def _model_from_linear(order, prob, bow, vocab, counts) -> NGramModel:
    logprob = [
        {g: (math.log(p) if p > 0 else float("-inf")) for g, p in prob[k].items()} for k in range(order)
    ]
    logbow = [
        {g: (math.log(b) if b > 0 else float("-inf")) for g, b in bow[k].items()} for k in range(order)
    ]
    return NGramModel(order=order, logprob=logprob, backoff=logbow, vocab=vocab, counts=[dict(c) for c in counts])


def ngram_logprob(model: NGramModel, context: Sequence, word) -> float:
    """Backoff lookup of ln p(word | context).

    The context is truncated to the most recent order-1 tokens; words
    outside the vocabulary map to the unknown symbol.
    """
    w = model.map_word(word.surface if isinstance(word, Token) else str(word))
    ctx = tuple(model.map_word(t.surface if isinstance(t, Token) else str(t)) for t in context)
    ctx = ctx[max(0, len(ctx) - (model.order - 1)) :]
    return _backoff_lookup(model, ctx, w)


def _backoff_lookup(model: NGramModel, ctx: Gram, w: str) -> float:
    k = len(ctx) + 1
    entry = model.logprob[k - 1].get(ctx + (w,))
    if entry is not None:
        return entry
    if not ctx:
        # The unk symbol is always present, so this terminates.
        return model.logprob[0][(UNK_WORD,)]
    weight = model.backoff[len(ctx) - 1].get(ctx, 0.0)
    return weight + _backoff_lookup(model, ctx[1:], w)


def sentence_logprob(model: NGramModel, tokens: Sequence) -> float:
    """Chain-rule ln probability of a sentence including the end symbol."""
    history: list[str] = [SENT_BEGIN]
    total = 0.0
    for tok in tokens:
        total += ngram_logprob(model, history, tok)
        history.append(tok.surface if isinstance(tok, Token) else str(tok))
    total += ngram_logprob(model, history, SENT_END)
    return total


def corpus_perplexity(model: NGramModel, sentences: Iterable[Sequence]) -> float:
    total = 0.0
    n = 0
    for sentence in sentences:
        total += sentence_logprob(model, sentence)
        n += len(sentence) + 1
    if n == 0:
        raise DataError("empty corpus")
    return math.exp(-total / n)


def score_hypothesis_ngram(
    model: NGramModel,
    hyp: Hypothesis,
    oov_vocab: Vocabulary | None = None,
    dimension: str = "ngram",
    with_counts: bool = True,
) -> Hypothesis:
    """Attach the LM score under ``dimension`` plus, when ``with_counts``,
    the "wordcount" and "oov_count" dimensions.

    oov_count is measured against ``oov_vocab`` when given (the designated
    rescoring vocabulary), else against the model's own vocabulary. Extra
    models score into their own dimension with with_counts=False so the
    first model's count dimensions survive.
    """
    updates = {dimension: sentence_logprob(model, hyp.tokens)}
    if with_counts:
        vocab_words = oov_vocab.words if oov_vocab is not None else model.vocab.words
        updates["wordcount"] = float(len(hyp.tokens))
        updates["oov_count"] = float(sum(1 for t in hyp.tokens if t.surface not in vocab_words))
    return Hypothesis(tokens=hyp.tokens, scores=hyp.scores.updated(**updates))


def score_nbest_ngram(
    model: NGramModel,
    nbest: NBestList,
    oov_vocab: Vocabulary | None = None,
    dimension: str = "ngram",
    with_counts: bool = True,
) -> NBestList:
    return nbest.with_hypotheses(
        [score_hypothesis_ngram(model, h, oov_vocab, dimension, with_counts) for h in nbest.hypotheses]
    )


def prune_ngram(model: NGramModel, cutoffs: Mapping[int, int]) -> NGramModel:
    """Drop n-grams whose training count falls below the per-order cutoff.

    Unigrams are never pruned; higher-order entries whose context was
    pruned are dropped too, and backoff weights are recomputed so every
    conditional still sums to one.
    """
    for k, c in cutoffs.items():
        if k <= 1 and c > 0:
            raise ConfigError("unigrams cannot be pruned")
        if k > model.order:
            raise ConfigError(f"cutoff order {k} exceeds model order {model.order}")
    if model.counts is None:
        raise DataError("model has no training counts; cannot apply count cutoffs")

    prob = [dict(t) for t in model.logprob]
    counts = [dict(t) for t in model.counts]
    for k in range(2, model.order + 1):
        cutoff = cutoffs.get(k, 0)
        kept = {}
        kept_counts = {}
        for gram, lp in prob[k - 1].items():
            if counts[k - 1].get(gram, 0) < cutoff:
                continue
            if gram[:-1] not in prob[k - 2]:
                continue  # context pruned at the lower order
            kept[gram] = lp
            kept_counts[gram] = counts[k - 1].get(gram, 0)
        prob[k - 1] = kept
        counts[k - 1] = kept_counts

    linear = [{g: math.exp(lp) for g, lp in prob[k].items()} for k in range(model.order)]
    bow = [dict() for _ in range(model.order)]
    _recompute_backoffs(model.order, linear, bow)
    return _model_from_linear(model.order, linear, bow, model.vocab, counts)


def build_vocabulary(
    in_domain: Iterable[Sequence],
    out_of_domain: Iterable[Sequence] = (),
    top_k: int = 0,
    min_count: int = 1,
) -> Vocabulary:
    """In-domain words with count >= min_count plus the top_k most frequent
    out-of-domain words (frequency ties broken lexicographically)."""
    in_counts: Counter[str] = Counter()
    for sentence in in_domain:
        in_counts.update(_surfaces(sentence))
    ood_counts: Counter[str] = Counter()
    for sentence in out_of_domain:
        ood_counts.update(_surfaces(sentence))

    words = {w for w, c in in_counts.items() if c >= min_count}
    ranked = sorted(ood_counts.items(), key=lambda item: (-item[1], item[0]))
    words.update(w for w, _ in ranked[:top_k])
    counts = {w: in_counts.get(w, 0) + ood_counts.get(w, 0) for w in words}
    return Vocabulary(words=frozenset(words), counts=counts)


def _fmt10(value: float) -> str:
    log10 = value / LN10 if value != float("-inf") else LOG10_ZERO
    if log10 < LOG10_ZERO:
        log10 = LOG10_ZERO
    text = f"{log10:.7g}"
    return "0" if text == "-0" else text


def write_arpa(model: NGramModel, path: str | os.PathLike) -> None:
    """Write the canonical ARPA form: base-10 logs at 7 significant digits,
    entries sorted lexicographically within each order."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("\\data\\\n")
        for k in range(1, model.order + 1):
            f.write(f"ngram {k}={len(model.logprob[k - 1])}\n")
        f.write("\n")
        for k in range(1, model.order + 1):
            f.write(f"\\{k}-grams:\n")
            for gram in sorted(model.logprob[k - 1]):
                line = f"{_fmt10(model.logprob[k - 1][gram])}\t{' '.join(gram)}"
                if k < model.order:
                    line += f"\t{_fmt10(model.backoff[k - 1].get(gram, 0.0))}"
                f.write(line + "\n")
            f.write("\n")
        f.write("\\end\\\n")


def read_arpa(path: str | os.PathLike) -> NGramModel:
    """Parse an ARPA file; raises DataError with a line number on malformed
    headers or section/count mismatches."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    def fail(lineno: int, msg: str):
        raise DataError(f"{path}:{lineno + 1}: {msg}")

    i = 0
    while i < len(lines) and lines[i].strip() != "\\data\\":
        if lines[i].strip():
            fail(i, f"expected \\data\\ header, got {lines[i]!r}")
        i += 1
    if i == len(lines):
        fail(len(lines) - 1, "missing \\data\\ header")
    i += 1
    declared: dict[int, int] = {}
    while i < len(lines) and lines[i].strip():
        text = lines[i].strip()
        if not text.startswith("ngram "):
            fail(i, f"bad count line {text!r}")
        try:
            k, n = text[len("ngram ") :].split("=")
            declared[int(k)] = int(n)
        except ValueError:
            fail(i, f"bad count line {text!r}")
        i += 1
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        fail(i - 1, f"bad ngram order declarations {declared}")
    order = max(declared)

    logprob: list[dict[Gram, float]] = [dict() for _ in range(order)]
    backoff: list[dict[Gram, float]] = [dict() for _ in range(order)]
    current = 0
    while i < len(lines):
        text = lines[i].strip()
        if not text:
            i += 1
            continue
        if text == "\\end\\":
            break
        section = text.removeprefix("\\").removesuffix("-grams:")
        if text.startswith("\\") and text.endswith("-grams:") and section.isdigit():
            current = int(section)
            if current not in declared:
                fail(i, f"undeclared section {text!r}")
            i += 1
            continue
        if current == 0:
            fail(i, f"entry outside any section: {text!r}")
        fields = text.split("\t") if "\t" in text else text.split()
        has_bow = current < order and len(fields) == 3
        if not (len(fields) == 2 or has_bow):
            fail(i, f"bad entry {text!r}")
        try:
            lp = float(fields[0]) * LN10
        except ValueError:
            fail(i, f"bad log-probability in {text!r}")
        gram = tuple(fields[1].split())
        if len(gram) != current:
            fail(i, f"{len(gram)}-gram in \\{current}-grams: section")
        logprob[current - 1][gram] = lp
        if has_bow:
            try:
                backoff[current - 1][gram] = float(fields[2]) * LN10
            except ValueError:
                fail(i, f"bad backoff weight in {text!r}")
        i += 1
    else:
        fail(len(lines) - 1, "missing \\end\\ marker")

    for k, n in declared.items():
        if len(logprob[k - 1]) != n:
            fail(i, f"\\data\\ declares {n} {k}-grams but {len(logprob[k - 1])} were read")

    words = {g[0] for g in logprob[0]}
    vocab = Vocabulary(words=frozenset(words | {SENT_BEGIN, SENT_END, UNK_WORD}))
    return NGramModel(order=order, logprob=logprob, backoff=backoff, vocab=vocab, counts=None)
