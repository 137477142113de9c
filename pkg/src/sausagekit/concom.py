"""Confusion-network combination: aligning weighted hypotheses into
sausage networks, multi-system merging, consensus decoding, regeneration
of N-best lists from networks, the backchannel pseudo-score, and
brute-force system subset selection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import (
    ConfigError,
    ConfusionNetwork,
    DataError,
    DEFAULT_BACKCHANNELS,
    DEFAULT_NORM,
    Hypothesis,
    NBestList,
    NULL_WORD,
    ScoreVector,
    Token,
)
from .fusion import WeightVector, nbest_posteriors
from .scoring import AlignCosts, wer

MAX_SELECTION_CANDIDATES = 16
INSERTION_COST = 1.0

# Alignment moves while merging a hypothesis into the working bins:
#   SUB consumes a bin and a word, DEL consumes a bin (null mass),
#   INS consumes a word (new bin). Ties break in that order.
_SUB, _DEL, _INS = 0, 1, 2


@dataclass(frozen=True)
class WeightedHypothesis:
    """A hypothesis carrying its utterance-level posterior; system_id and
    rank only serve to make the alignment order deterministic."""

    tokens: tuple[Token, ...]
    posterior: float
    system_id: str = ""
    rank: int = 0

    def __post_init__(self):
        if not 0.0 <= self.posterior <= 1.0 + 1e-9:
            raise DataError(f"posterior {self.posterior} outside [0, 1]")


def weighted_from_nbest(nbest: NBestList, w: WeightVector, system_weight: float = 1.0) -> list[WeightedHypothesis]:
    posteriors = nbest_posteriors(nbest, w)
    return [
        WeightedHypothesis(
            tokens=h.tokens,
            posterior=float(p) * system_weight,
            system_id=nbest.system_id,
            rank=k,
        )
        for k, (h, p) in enumerate(zip(nbest.hypotheses, posteriors))
    ]


def build_cn(hyps: Sequence[WeightedHypothesis], utterance_id: str = "") -> ConfusionNetwork:
    """Merge hypotheses into a confusion network.

    Processing order is descending posterior (ties by system_id, then
    rank). The first hypothesis seeds one bin per token; each next one is
    aligned to the working bins by minimum edit cost where substituting
    into a bin costs 1 minus the word's normalized share of the bin,
    skipping a bin costs 1 minus the null word's share, and insertion
    (cost 1) opens a new bin whose null word absorbs all mass aligned so
    far. Bins are renormalized at the end.
    """
    if not hyps:
        raise DataError("cannot build a confusion network from no hypotheses")
    total_mass = sum(h.posterior for h in hyps)
    if total_mass > 1.0 + 1e-6:
        raise DataError(f"hypothesis posteriors sum to {total_mass}, over 1")
    ordered = sorted(hyps, key=lambda h: (-h.posterior, h.system_id, h.rank))

    first = ordered[0]
    bins: list[dict[str, float]] = [{t.surface: first.posterior} for t in first.tokens]
    aligned_mass = first.posterior

    for hyp in ordered[1:]:
        words = [t.surface for t in hyp.tokens]
        moves = _align_to_bins(words, bins)
        new_bins: list[dict[str, float]] = []
        i = j = 0
        for move in moves:
            if move == _SUB:
                b = bins[j]
                b[words[i]] = b.get(words[i], 0.0) + hyp.posterior
                new_bins.append(b)
                i, j = i + 1, j + 1
            elif move == _DEL:
                b = bins[j]
                b[NULL_WORD] = b.get(NULL_WORD, 0.0) + hyp.posterior
                new_bins.append(b)
                j += 1
            else:
                new_bins.append({words[i]: hyp.posterior, NULL_WORD: aligned_mass})
                i += 1
        bins = new_bins
        aligned_mass += hyp.posterior

    final = []
    for b in bins:
        total = sum(b.values())
        final.append({w: v / total for w, v in b.items()})
    return ConfusionNetwork(utterance_id=utterance_id, bins=tuple(final))


def _align_to_bins(words: list[str], bins: list[dict[str, float]]) -> list[int]:
    """Minimum-cost monotone alignment of words to bins.

    Suffix costs accumulate right-associatively and ties keep the first
    move in SUB, DEL, INS order, so the chosen path is the
    lexicographically first minimum-cost move sequence.
    """
    nw, nb = len(words), len(bins)
    totals = [sum(b.values()) for b in bins]
    sub = [[1.0 - bins[j].get(words[i], 0.0) / totals[j] for j in range(nb)] for i in range(nw)]
    dele = [1.0 - bins[j].get(NULL_WORD, 0.0) / totals[j] for j in range(nb)]

    d = [[0.0] * (nb + 1) for _ in range(nw + 1)]
    for j in range(nb - 1, -1, -1):
        d[nw][j] = dele[j] + d[nw][j + 1]
    for i in range(nw - 1, -1, -1):
        d[i][nb] = INSERTION_COST + d[i + 1][nb]
        for j in range(nb - 1, -1, -1):
            best = sub[i][j] + d[i + 1][j + 1]
            cand = dele[j] + d[i][j + 1]
            if cand < best:
                best = cand
            cand = INSERTION_COST + d[i + 1][j]
            if cand < best:
                best = cand
            d[i][j] = best

    moves: list[int] = []
    i = j = 0
    while i < nw or j < nb:
        if i < nw and j < nb and sub[i][j] + d[i + 1][j + 1] == d[i][j]:
            moves.append(_SUB)
            i, j = i + 1, j + 1
        elif j < nb and dele[j] + d[i][j + 1] == d[i][j]:
            moves.append(_DEL)
            j += 1
        else:
            moves.append(_INS)
            i += 1
    return moves


@dataclass(frozen=True)
class SystemOutput:
    """One system's rescored N-best lists keyed by utterance id."""

    system_id: str
    lists: Mapping[str, NBestList]

    def utterance_ids(self) -> list[str]:
        return sorted(self.lists)


def combine_systems(
    outputs: Sequence[SystemOutput],
    utt_id: str,
    w: WeightVector | Mapping[str, WeightVector],
) -> ConfusionNetwork:
    """Pool all systems' hypotheses for one utterance into a network.

    Every system contributes equal total mass: its posteriors are divided
    by the system count before merging. ``w`` is either one WeightVector
    for all systems or a map keyed by system_id.
    """
    if not outputs:
        raise DataError("no systems to combine")
    pooled: list[WeightedHypothesis] = []
    share = 1.0 / len(outputs)
    for out in outputs:
        if utt_id not in out.lists:
            raise DataError(f"system {out.system_id!r} has no output for utterance {utt_id!r}")
        if isinstance(w, Mapping) and not isinstance(w, WeightVector):
            if out.system_id not in w:
                raise ConfigError(f"no weight vector for system {out.system_id!r}")
            weights = w[out.system_id]
        else:
            weights = w
        pooled.extend(weighted_from_nbest(out.lists[utt_id], weights, system_weight=share))
    return build_cn(pooled, utterance_id=utt_id)


def consensus(cn: ConfusionNetwork) -> tuple[Token, ...]:
    """Per-bin argmax readout; the null word emits nothing and loses all
    exact ties, other ties go to the lexicographically smaller word."""
    tokens = []
    for b in cn.bins:
        word, _ = min(b.items(), key=lambda kv: (-kv[1], kv[0] == NULL_WORD, kv[0]))
        if word != NULL_WORD:
            tokens.append(DEFAULT_NORM.make_token(word))
    return tuple(tokens)


def cn_to_nbest(
    cn: ConfusionNetwork,
    n: int,
    system_id: str = "cn",
) -> NBestList:
    """Exact top-n word strings by total log bin posterior.

    Paths that differ only in null-word choices collapse to one string and
    keep the best (maximum) score; the "cn_posterior" dimension records
    the sum of chosen bins' log posteriors, null bins included.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    states: dict[tuple[str, ...], float] = {(): 0.0}
    for b in cn.bins:
        advanced: dict[tuple[str, ...], float] = {}
        for prefix, score in states.items():
            for word, p in b.items():
                lp = math.log(p) if p > 0.0 else float("-inf")
                key = prefix if word == NULL_WORD else prefix + (word,)
                cand = score + lp
                old = advanced.get(key)
                if old is None or cand > old:
                    advanced[key] = cand
        states = advanced
    ranked = sorted(states.items(), key=lambda kv: (-kv[1], kv[0]))[:n]
    hyps = tuple(
        Hypothesis(
            tokens=tuple(DEFAULT_NORM.make_token(w) for w in surface),
            scores=ScoreVector({"cn_posterior": score}),
        )
        for surface, score in ranked
    )
    return NBestList(utterance_id=cn.utterance_id, system_id=system_id, hypotheses=hyps)


def add_backchannel_score(nbest: NBestList, lexicon: frozenset[str] | set[str] = DEFAULT_BACKCHANNELS) -> NBestList:
    """Attach "backchannel_count": how many tokens are listener
    acknowledgments; the fusion weight for it is learned downstream."""
    rescored = [
        Hypothesis(
            tokens=h.tokens,
            scores=h.scores.updated(
                backchannel_count=float(sum(1 for t in h.tokens if t.surface in lexicon))
            ),
        )
        for h in nbest.hypotheses
    ]
    return nbest.with_hypotheses(rescored)


@dataclass(frozen=True)
class SelectionReport:
    chosen: tuple[str, ...]
    chosen_wer: float
    subset_wers: Mapping[tuple[str, ...], float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "chosen": list(self.chosen),
            "wer": self.chosen_wer,
            "subsets": [
                {"systems": list(ids), "wer": w}
                for ids, w in sorted(self.subset_wers.items(), key=lambda kv: (kv[1], len(kv[0]), kv[0]))
            ],
        }
        return json.dumps(doc, indent=2)


def select_systems(
    candidates: Sequence[SystemOutput],
    dev_refs: Mapping[str, Sequence],
    w: WeightVector | Mapping[str, WeightVector],
    costs: AlignCosts = AlignCosts(),
) -> SelectionReport:
    """Evaluate every non-empty subset of systems by combined-consensus
    WER on the dev references; smallest WER wins, ties prefer fewer
    systems, then lexicographically smaller id tuples."""
    if not 1 <= len(candidates) <= MAX_SELECTION_CANDIDATES:
        raise ConfigError(
            f"need between 1 and {MAX_SELECTION_CANDIDATES} candidate systems, got {len(candidates)}"
        )
    ids = [c.system_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate system ids: {ids}")
    utt_ids = sorted(dev_refs)
    if not utt_ids:
        raise DataError("no development references")

    subset_wers: dict[tuple[str, ...], float] = {}
    for mask in range(1, 2 ** len(candidates)):
        subset = [c for b, c in enumerate(candidates) if mask >> b & 1]
        hyps = {}
        for utt_id in utt_ids:
            cn = combine_systems(subset, utt_id, w)
            hyps[utt_id] = [t.surface for t in consensus(cn)]
        report = wer({u: [str(t) for t in dev_refs[u]] for u in utt_ids}, hyps, costs=costs)
        subset_wers[tuple(sorted(s.system_id for s in subset))] = report.wer

    chosen, chosen_wer = min(
        subset_wers.items(), key=lambda kv: (kv[1], len(kv[0]), kv[0])
    )
    return SelectionReport(chosen=chosen, chosen_wer=chosen_wer, subset_wers=subset_wers)
