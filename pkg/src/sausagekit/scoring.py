"""NIST-style scoring: weighted Levenshtein alignment, corpus word error
rate, OOV-rate measurement, and perplexity aggregation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import DataError, Token, Vocabulary

MATCH = "MATCH"
SUB = "SUB"
INS = "INS"
DEL = "DEL"


@dataclass(frozen=True)
class AlignCosts:
    """Edit weights; defaults follow the sclite 4/3/3 convention."""

    sub: float = 4.0
    ins: float = 3.0
    delete: float = 3.0
    match: float = 0.0


UNIT_COSTS = AlignCosts(sub=1.0, ins=1.0, delete=1.0, match=0.0)


@dataclass(frozen=True)
class AlignStep:
    op: str
    ref: Token | None = None
    hyp: Token | None = None


@dataclass(frozen=True)
class Alignment:
    steps: tuple[AlignStep, ...]
    cost: float

    @property
    def n_match(self) -> int:
        return sum(1 for s in self.steps if s.op == MATCH)

    @property
    def n_sub(self) -> int:
        return sum(1 for s in self.steps if s.op == SUB)

    @property
    def n_ins(self) -> int:
        return sum(1 for s in self.steps if s.op == INS)

    @property
    def n_del(self) -> int:
        return sum(1 for s in self.steps if s.op == DEL)

    @property
    def n_ref(self) -> int:
        return self.n_match + self.n_sub + self.n_del

    @property
    def n_err(self) -> int:
        return self.n_sub + self.n_ins + self.n_del


def _as_token(item) -> Token:
    return item if isinstance(item, Token) else Token(str(item))


def _fragment_match(ref: Token, hyp: Token) -> bool:
    stem = ref.surface[:-1]
    return ref.is_fragment and bool(stem) and hyp.surface.startswith(stem)


def align(
    ref: Sequence,
    hyp: Sequence,
    costs: AlignCosts = AlignCosts(),
    fragment_forgiving: bool = False,
) -> Alignment:
    """Minimum-cost alignment of hypothesis to reference tokens.

    Ties between equal-cost alignments break by move preference
    SUB/MATCH > INS > DEL, applied left to right, so the result is
    deterministic. With ``fragment_forgiving``, a hypothesis word that
    extends a reference fragment's stem counts as a match.
    """
    r = [_as_token(t) for t in ref]
    h = [_as_token(t) for t in hyp]
    nr, nh = len(r), len(h)

    def diag_cost(i: int, j: int) -> float:
        if r[i].surface == h[j].surface:
            return costs.match
        if fragment_forgiving and _fragment_match(r[i], h[j]):
            return costs.match
        return costs.sub

    # d[i][j] = min cost of aligning ref[i:] with hyp[j:]
    d = [[0.0] * (nh + 1) for _ in range(nr + 1)]
    for i in range(nr - 1, -1, -1):
        d[i][nh] = d[i + 1][nh] + costs.delete
    for j in range(nh - 1, -1, -1):
        d[nr][j] = d[nr][j + 1] + costs.ins
    for i in range(nr - 1, -1, -1):
        row, below = d[i], d[i + 1]
        for j in range(nh - 1, -1, -1):
            row[j] = min(
                diag_cost(i, j) + below[j + 1],
                costs.ins + row[j + 1],
                costs.delete + below[j],
            )

    steps: list[AlignStep] = []
    i = j = 0
    while i < nr or j < nh:
        if i < nr and j < nh:
            c = diag_cost(i, j)
            if c + d[i + 1][j + 1] == d[i][j]:
                op = MATCH if c == costs.match else SUB
                steps.append(AlignStep(op, ref=r[i], hyp=h[j]))
                i, j = i + 1, j + 1
                continue
        if j < nh and costs.ins + d[i][j + 1] == d[i][j]:
            steps.append(AlignStep(INS, hyp=h[j]))
            j += 1
            continue
        steps.append(AlignStep(DEL, ref=r[i]))
        i += 1
    return Alignment(steps=tuple(steps), cost=d[0][0])


@dataclass(frozen=True)
class UtteranceCounts:
    n_match: int
    n_sub: int
    n_ins: int
    n_del: int

    @property
    def n_ref(self) -> int:
        return self.n_match + self.n_sub + self.n_del

    @property
    def n_err(self) -> int:
        return self.n_sub + self.n_ins + self.n_del


@dataclass(frozen=True)
class WerReport:
    """Corpus-pooled word error rate: counts are summed over utterances
    before division, never averaged per utterance."""

    per_utterance: Mapping[str, UtteranceCounts]
    n_match: int
    n_sub: int
    n_ins: int
    n_del: int

    @property
    def n_ref(self) -> int:
        return self.n_match + self.n_sub + self.n_del

    @property
    def n_err(self) -> int:
        return self.n_sub + self.n_ins + self.n_del

    @property
    def wer(self) -> float:
        return self.n_err / self.n_ref

    def to_json(self) -> str:
        doc = {
            "wer": self.wer,
            "n_ref": self.n_ref,
            "n_sub": self.n_sub,
            "n_ins": self.n_ins,
            "n_del": self.n_del,
            "per_utterance": {
                utt: {
                    "n_ref": c.n_ref,
                    "n_sub": c.n_sub,
                    "n_ins": c.n_ins,
                    "n_del": c.n_del,
                    "wer": (c.n_err / c.n_ref) if c.n_ref else None,
                }
                for utt, c in sorted(self.per_utterance.items())
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'utterance':<28} {'ref':>5} {'sub':>5} {'ins':>5} {'del':>5} {'wer%':>7}"]
        for utt, c in sorted(self.per_utterance.items()):
            wer = 100.0 * c.n_err / c.n_ref if c.n_ref else float("nan")
            lines.append(f"{utt:<28} {c.n_ref:>5} {c.n_sub:>5} {c.n_ins:>5} {c.n_del:>5} {wer:>7.2f}")
        lines.append(
            f"{'TOTAL':<28} {self.n_ref:>5} {self.n_sub:>5} {self.n_ins:>5} {self.n_del:>5} "
            f"{100.0 * self.wer:>7.2f}"
        )
        return "\n".join(lines)


def wer(
    refs: Mapping[str, Sequence],
    hyps: Mapping[str, Sequence],
    costs: AlignCosts = AlignCosts(),
    fragment_forgiving: bool = False,
) -> WerReport:
    """Score every hypothesis utterance against its reference."""
    per_utt: dict[str, UtteranceCounts] = {}
    totals = [0, 0, 0, 0]
    for utt_id in hyps:
        if utt_id not in refs:
            raise DataError(f"no reference for utterance {utt_id!r}")
        a = align(refs[utt_id], hyps[utt_id], costs=costs, fragment_forgiving=fragment_forgiving)
        counts = UtteranceCounts(a.n_match, a.n_sub, a.n_ins, a.n_del)
        per_utt[utt_id] = counts
        totals[0] += counts.n_match
        totals[1] += counts.n_sub
        totals[2] += counts.n_ins
        totals[3] += counts.n_del
    report = WerReport(per_utterance=per_utt, n_match=totals[0], n_sub=totals[1], n_ins=totals[2], n_del=totals[3])
    if report.n_ref == 0:
        raise DataError("reference token count is zero; WER undefined")
    return report


def oov_rate(vocab: Vocabulary, refs: Iterable[Sequence], exclude_fragments: bool = False) -> float:
    """Fraction of counted reference tokens absent from the vocabulary.

    With ``exclude_fragments``, word fragments leave both the numerator
    and the denominator.
    """
    counted = 0
    oov = 0
    for utt in refs:
        for item in utt:
            token = _as_token(item)
            if exclude_fragments and token.is_fragment:
                continue
            counted += 1
            if token.surface not in vocab:
                oov += 1
    if counted == 0:
        raise DataError("no countable reference tokens for OOV rate")
    return oov / counted


def perplexity(log_probs: Iterable[float]) -> float:
    """exp of the negative mean of natural-log token probabilities."""
    values = [float(x) for x in log_probs]
    if not values:
        raise DataError("perplexity of an empty token stream is undefined")
    if any(not math.isfinite(v) for v in values):
        raise DataError("perplexity requires finite log-probabilities")
    return math.exp(-sum(values) / len(values))
