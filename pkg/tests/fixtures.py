"""Synthetic corpora with planted structure, shared across test modules.

Each factory returns plain package objects plus the facts the tests
assert (planted best subset, reference transcripts, ...). Everything is
deterministic: fixed word lists, fixed error positions, no RNG unless a
seed parameter says otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from sausagekit.concom import SystemOutput, WeightedHypothesis
from sausagekit.core import (
    Hypothesis,
    NBestList,
    ScoreVector,
    SessionItem,
    SessionTranscript,
    TimedUtterance,
    Token,
    serialize_session,
)
from sausagekit.fusion import WeightVector

WORDS = ["delta", "echo", "foxtrot", "golf", "hotel", "india"]


def _toks(words):
    return tuple(Token(w) for w in words)


def _hyp(words, **dims):
    return Hypothesis(tokens=_toks(words), scores=ScoreVector(dims))


def _single_list(utt_id, system_id, words, **dims):
    return NBestList(
        utterance_id=utt_id,
        system_id=system_id,
        hypotheses=(_hyp(words, **dims),),
    )


def make_three_system_fixture(n_utts: int = 10):
    """Three single-hypothesis systems over a shared reference.

    sys1 errs at position 2 of even utterances, sys2 at position 4 of odd
    utterances, sys3 at positions 0 and 1 everywhere. sys1 and sys2 never
    err together, so their pairwise consensus is perfect; sys3's errors
    sort lexicographically before the correct words, so any subset that
    includes it loses the 50/50 consensus ties and gets strictly worse.
    Planted best subset: {sys1, sys2}.

    Returns (candidates, refs, expected_ids).
    """
    refs = {}
    per_system = {"sys1": {}, "sys2": {}, "sys3": {}}
    for i in range(n_utts):
        utt = f"fx_u{i:02d}"
        ref = [WORDS[(i + j) % len(WORDS)] for j in range(6)]
        refs[utt] = list(ref)

        h1 = list(ref)
        if i % 2 == 0:
            h1[2] = "zeta1"
        h2 = list(ref)
        if i % 2 == 1:
            h2[4] = "zeta2"
        h3 = list(ref)
        h3[0] = "alpha0"
        h3[1] = "alpha1"

        per_system["sys1"][utt] = _single_list(utt, "sys1", h1, am=-1.0)
        per_system["sys2"][utt] = _single_list(utt, "sys2", h2, am=-1.0)
        per_system["sys3"][utt] = _single_list(utt, "sys3", h3, am=-1.0)

    candidates = [SystemOutput(system_id=s, lists=per_system[s]) for s in ("sys1", "sys2", "sys3")]
    weights = WeightVector({"am": 1.0})
    return candidates, refs, {"sys1", "sys2"}, weights


def make_backchannel_fixture():
    """Dev set where an acknowledgement-word pseudo-score must go negative.

    Six utterances pair a wrong top hypothesis containing "uh-huh" with a
    close runner-up that is correct (log posteriors ln 0.52 vs ln 0.48):
    any weight below ln(0.48/0.52) = -0.080 flips them. Three utterances
    genuinely contain "uh-huh" with a wide margin (ln 0.80 vs ln 0.20)
    and only flip below -1.386. A weight in (-1.386, -0.080) therefore
    fixes all six errors while breaking nothing, so the tuned weight must
    be negative and the tuned WER strictly better than at weight zero.

    Returns list of (NBestList, reference_words) pairs.
    """
    dev = []
    for i in range(6):
        utt = f"bc_fix{i}"
        wrong = _hyp(["uh-huh", "yes", WORDS[i % len(WORDS)]],
                     cn_posterior=math.log(0.52), backchannel_count=1.0)
        right = _hyp(["uh", "yes", WORDS[i % len(WORDS)]],
                     cn_posterior=math.log(0.48), backchannel_count=0.0)
        nb = NBestList(utterance_id=utt, system_id="cn", hypotheses=(wrong, right))
        dev.append((nb, ["uh", "yes", WORDS[i % len(WORDS)]]))
    for i in range(3):
        utt = f"bc_keep{i}"
        right = _hyp(["uh-huh", "right", WORDS[i]],
                     cn_posterior=math.log(0.80), backchannel_count=1.0)
        wrong = _hyp(["uh", "right", WORDS[i]],
                     cn_posterior=math.log(0.20), backchannel_count=0.0)
        nb = NBestList(utterance_id=utt, system_id="cn", hypotheses=(right, wrong))
        dev.append((nb, ["uh-huh", "right", WORDS[i]]))
    return dev


def make_entrainment_corpus(n_conversations, n_utterances, seed,
                            vocab_n: int = 12, utt_len: int = 6, reuse: int = 3):
    """Conversations where each utterance opens by echoing the previous
    utterance's last `reuse` words, in order, then continues with fresh
    distinct words. With utt_len=6 and reuse=3 every utterance repeats
    exactly half of its predecessor, so a model that carries conversation
    state can predict the opening words almost for free while a
    per-utterance model cannot.

    Returns (words, conversations) with conversations a list of
    conversations, each a list of utterances, each a list of words.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{k:02d}" for k in range(vocab_n)]
    conversations = []
    for _ in range(n_conversations):
        utterances, prev = [], None
        for _ in range(n_utterances):
            if prev is None:
                cur = list(rng.choice(words, size=utt_len, replace=False))
            else:
                kept = prev[-reuse:]
                pool = [w for w in words if w not in kept]
                fresh = list(rng.choice(pool, size=utt_len - reuse, replace=False))
                cur = kept + fresh
            utterances.append(cur)
            prev = cur
        conversations.append(utterances)
    return words, conversations


def entrainment_transcripts(conversations, prefix):
    """Serialize generated conversations with alternating speakers and
    non-overlapping 1.5s utterances."""
    out = []
    for c, utterances in enumerate(conversations):
        timed = [
            TimedUtterance(f"{prefix}{c:03d}", "AB"[i % 2], i * 2.0, i * 2.0 + 1.5,
                           _toks(u))
            for i, u in enumerate(utterances)
        ]
        out.append(serialize_session(timed))
    return out


def corrupt_transcripts(transcripts, rate, seed, words):
    """Replace each token with a random vocabulary word with probability
    `rate`, keeping the speaker/boundary flags. Models a history built
    from errorful recognition output instead of the true words."""
    rng = np.random.default_rng(seed)
    out = []
    for t in transcripts:
        items = []
        for item in t.items:
            surface = item.token.surface
            if rng.random() < rate:
                surface = words[rng.integers(len(words))]
            items.append(SessionItem(Token(surface), item.speaker_change,
                                     item.overlap, item.utterance_boundary))
        out.append(SessionTranscript(t.conversation_id, tuple(items)))
    return out


AGREEMENT_NAMES = ("alice", "robert")
AGREEMENT_TEMPLATE = ("went", "home", "and", "then")


def agreement_sentence(name):
    """'<name> went home and then <name> slept': the second mention sits
    five tokens after the first, beyond any bigram context."""
    return [name, *AGREEMENT_TEMPLATE, name, "slept"]


def make_agreement_corpus():
    """60 sentences, 30 per name, every one internally consistent. Both
    names occur equally in every local context, so a bigram model scores
    the two continuations identically while a recurrent model can learn
    that the second name copies the first."""
    return [agreement_sentence(n) for n in AGREEMENT_NAMES for _ in range(30)]


def make_agreement_fixture():
    """Two-hypothesis N-best lists where the acoustically preferred
    hypothesis (am -1.0 vs -1.05) is wrong: utterances 0-5 swap the
    second name, utterances 6-11 reverse the word order. A bigram LM
    fixes the reversals but is blind to the name swaps; only a model
    with longer memory recovers those.

    Returns (lists, refs, dev_ids, test_ids).
    """
    refs, lists = {}, []
    for i in range(12):
        name = AGREEMENT_NAMES[i % 2]
        correct = agreement_sentence(name)
        if i < 6:
            wrong = correct[:5] + [AGREEMENT_NAMES[1 - (i % 2)], "slept"]
        else:
            wrong = correct[::-1]
        utt = f"ag_u{i:02d}"
        refs[utt] = correct
        lists.append(NBestList(utterance_id=utt, system_id="sys1", hypotheses=(
            _hyp(wrong, am=-1.0),
            _hyp(correct, am=-1.05),
        )))
    dev = [u for u in sorted(refs) if int(u[-2:]) in (0, 1, 6, 7)]
    test = [u for u in sorted(refs) if u not in dev]
    return lists, refs, dev, test


def make_weighted(entries):
    """[(words, posterior), ...] or [(words, posterior, system, rank), ...]
    into WeightedHypothesis objects."""
    out = []
    for entry in entries:
        words, post = entry[0], entry[1]
        system = entry[2] if len(entry) > 2 else ""
        rank = entry[3] if len(entry) > 3 else 0
        out.append(WeightedHypothesis(tokens=_toks(words), posterior=post,
                                      system_id=system, rank=rank))
    return out
