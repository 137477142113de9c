"""Core data model: tokens, utterances, hypotheses, N-best lists, confusion
networks, score vectors, conversation sessions, and text normalization.

All types are immutable values after construction and safe to share across
workers. Scores are natural-log throughout; base-10 appears only at ARPA
file boundaries (see :mod:`sausagekit.ngram`).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

FRAGMENT_MARKER = "-"
NULL_WORD = "*DELETE*"
SENT_BEGIN = "<s>"
SENT_END = "</s>"
UNK_WORD = "<unk>"

RESERVED_WORDS = frozenset({NULL_WORD, SENT_BEGIN, SENT_END, UNK_WORD})

DEFAULT_BACKCHANNELS = frozenset({"uh-huh", "mhm", "uh-hum"})
DEFAULT_FILLED_PAUSES = frozenset({"uh", "um", "eh"})

# Names with documented semantics; ScoreVector accepts any well-formed name.
WELL_KNOWN_DIMENSIONS = (
    "am",
    "ngram",
    "lstm_fwd_w",
    "lstm_bwd_w",
    "wordcount",
    "oov_count",
    "backchannel_count",
    "cn_posterior",
)

_DIMENSION_RE = re.compile(r"^[^\s=|]+$")


class ConfigError(Exception):
    """Bad configuration or malformed model/config file (CLI exit code 2)."""


class DataError(Exception):
    """Bad or inconsistent input data (CLI exit code 3)."""


@dataclass(frozen=True)
class Token:
    """A single normalized word with transcription-convention flags."""

    surface: str
    is_fragment: bool = False
    is_backchannel: bool = False
    is_filled_pause: bool = False

    def __post_init__(self):
        if not self.surface or any(c.isspace() for c in self.surface):
            raise ValueError(f"token surface must be non-empty, no whitespace: {self.surface!r}")

    def __str__(self) -> str:
        return self.surface


@dataclass(frozen=True)
class NormConfig:
    """Text normalization settings.

    ``punctuation`` characters are stripped from token edges only; the
    fragment marker and word-internal characters (hyphens, apostrophes)
    survive, so normalization is idempotent.
    """

    lowercase: bool = True
    strip_punctuation: bool = True
    punctuation: str = ".,;:!?\"()[]{}"
    fragment_marker: str = FRAGMENT_MARKER
    backchannels: frozenset[str] = DEFAULT_BACKCHANNELS
    filled_pauses: frozenset[str] = DEFAULT_FILLED_PAUSES

    def make_token(self, surface: str) -> Token:
        """Build a Token from an already-normalized surface form."""
        return Token(
            surface=surface,
            is_fragment=surface.endswith(self.fragment_marker) and len(surface) > 1,
            is_backchannel=surface in self.backchannels,
            is_filled_pause=surface in self.filled_pauses,
        )


DEFAULT_NORM = NormConfig()


def normalize_text(raw: str, config: NormConfig = DEFAULT_NORM) -> tuple[Token, ...]:
    """Lowercase, whitespace-tokenize and flag raw text.

    Empty input yields an empty tuple. Tokens reduced to nothing by
    punctuation stripping are dropped.
    """
    tokens = []
    for piece in raw.split():
        if config.lowercase:
            piece = piece.lower()
        if config.strip_punctuation:
            piece = piece.strip(config.punctuation)
        if piece:
            tokens.append(config.make_token(piece))
    return tuple(tokens)


def tokens_from_surfaces(surfaces: Iterable[str], config: NormConfig = DEFAULT_NORM) -> tuple[Token, ...]:
    """Tokens for surfaces that are already normalized (file readers)."""
    return tuple(config.make_token(s) for s in surfaces)


@dataclass(frozen=True)
class TimedUtterance:
    """One speaker turn with waveform cut points as approximate timing."""

    conversation_id: str
    speaker: str
    onset: float
    end: float
    tokens: tuple[Token, ...] = ()

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if self.end <= self.onset:
            raise ValueError(f"end ({self.end}) must exceed onset ({self.onset})")


def utterance_id(conversation_id: str, speaker: str, onset: float) -> str:
    """Canonical utterance id shared by reference and N-best files."""
    return f"{conversation_id}_{speaker}_{int(round(onset * 1000)):08d}"


class ScoreVector(Mapping[str, float]):
    """Named log-scores for one hypothesis.

    Values are natural-log reals (or -inf for hard zeros); count-valued
    pseudo-scores (wordcount, oov_count, backchannel_count) are stored as
    raw counts and weighted at fusion time.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, float] | None = None):
        checked: dict[str, float] = {}
        for name, value in (entries or {}).items():
            if not _DIMENSION_RE.match(name):
                raise ValueError(f"bad score dimension name: {name!r}")
            value = float(value)
            if math.isnan(value) or value == math.inf:
                raise ValueError(f"score {name} must be finite or -inf, got {value}")
            checked[name] = value
        self._entries = checked

    def __getitem__(self, name: str) -> float:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v:g}" for k, v in sorted(self._entries.items()))
        return f"ScoreVector({inner})"

    def __eq__(self, other) -> bool:
        if isinstance(other, ScoreVector):
            return self._entries == other._entries
        return NotImplemented

    @property
    def dimensions(self) -> frozenset[str]:
        return frozenset(self._entries)

    def updated(self, **dims: float) -> "ScoreVector":
        """New vector with the given dimensions added or replaced."""
        merged = dict(self._entries)
        merged.update(dims)
        return ScoreVector(merged)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[Token, ...]
    scores: ScoreVector = field(default_factory=ScoreVector)

    def surfaces(self) -> tuple[str, ...]:
        return tuple(t.surface for t in self.tokens)


@dataclass(frozen=True)
class NBestList:
    """Ranked hypotheses for one utterance from one system."""

    utterance_id: str
    system_id: str
    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self):
        if not self.hypotheses:
            raise ValueError(f"N-best list for {self.utterance_id} has no hypotheses")
        dims = self.hypotheses[0].scores.dimensions
        for k, hyp in enumerate(self.hypotheses):
            if hyp.scores.dimensions != dims:
                raise ValueError(
                    f"hypothesis {k} of {self.utterance_id} has dimensions "
                    f"{sorted(hyp.scores.dimensions)}, expected {sorted(dims)}"
                )

    @property
    def dimensions(self) -> frozenset[str]:
        return self.hypotheses[0].scores.dimensions

    def with_hypotheses(self, hypotheses: Sequence[Hypothesis]) -> "NBestList":
        return NBestList(self.utterance_id, self.system_id, tuple(hypotheses))


@dataclass(frozen=True)
class ConfusionNetwork:
    """Ordered bins of word -> posterior, including the null word.

    Structural checks only happen here; stochasticity is checked by
    :func:`validate_cn` so that diagnostics can be run on broken networks.
    """

    utterance_id: str
    bins: tuple[dict[str, float], ...]

    def __post_init__(self):
        frozen = []
        for i, b in enumerate(self.bins):
            if not b:
                raise ValueError(f"bin {i} of {self.utterance_id} is empty")
            for word in b:
                if not word or any(c.isspace() for c in word):
                    raise ValueError(f"bin {i} has a bad word: {word!r}")
            frozen.append({w: float(p) for w, p in b.items()})
        object.__setattr__(self, "bins", tuple(frozen))


@dataclass(frozen=True)
class CnDiagnostics:
    ok: bool
    bin_residuals: tuple[float, ...]
    range_violations: tuple[tuple[int, str, float], ...]

    STOCHASTIC_TOL = 1e-9


def validate_cn(cn: ConfusionNetwork, tol: float = CnDiagnostics.STOCHASTIC_TOL) -> CnDiagnostics:
    """Report bins violating the sum-to-1 or [0, 1] range invariants."""
    residuals = []
    violations = []
    for i, b in enumerate(cn.bins):
        residuals.append(abs(sum(b.values()) - 1.0))
        for word, p in b.items():
            if not (0.0 <= p <= 1.0):
                violations.append((i, word, p))
    ok = not violations and all(r <= tol for r in residuals)
    return CnDiagnostics(ok, tuple(residuals), tuple(violations))


@dataclass(frozen=True)
class SessionItem:
    token: Token
    speaker_change: int = 0
    overlap: int = 0
    utterance_boundary: int = 0


@dataclass(frozen=True)
class SessionTranscript:
    """One conversation's tokens serialized by utterance onset time."""

    conversation_id: str
    items: tuple[SessionItem, ...]

    def __len__(self) -> int:
        return len(self.items)

    def surfaces(self) -> tuple[str, ...]:
        return tuple(item.token.surface for item in self.items)


def serialize_session(
    utterances: Sequence[TimedUtterance],
    speaker_change: bool = True,
    overlap: bool = True,
) -> SessionTranscript:
    """String both speakers' words together, ordered by utterance onset.

    Onset ties break by (speaker, end), which keeps the serialization
    deterministic and symmetric across runs. The speaker-change bit is set
    on the first token of any utterance whose speaker differs from the
    previous utterance's; the overlap bit on every token of an utterance
    whose onset precedes the previous utterance's end. Disabled flags stay 0.
    """
    if not utterances:
        raise DataError("cannot serialize an empty utterance list")
    conv_ids = {u.conversation_id for u in utterances}
    if len(conv_ids) > 1:
        raise DataError(f"mixed conversation ids: {sorted(conv_ids)}")

    ordered = sorted(utterances, key=lambda u: (u.onset, u.speaker, u.end))
    items: list[SessionItem] = []
    prev: TimedUtterance | None = None
    for utt in ordered:
        changed = prev is not None and utt.speaker != prev.speaker
        overlapped = prev is not None and utt.onset < prev.end
        for j, tok in enumerate(utt.tokens):
            items.append(
                SessionItem(
                    token=tok,
                    speaker_change=int(speaker_change and changed and j == 0),
                    overlap=int(overlap and overlapped),
                    utterance_boundary=int(j == 0),
                )
            )
        prev = utt
    return SessionTranscript(conversation_id=conv_ids.pop(), items=tuple(items))


@dataclass(frozen=True)
class Vocabulary:
    """A closed word set, optionally with training counts."""

    words: frozenset[str]
    counts: Mapping[str, int] | None = None

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_words(cls, words: Iterable[str], counts: Mapping[str, int] | None = None) -> "Vocabulary":
        return cls(words=frozenset(words), counts=dict(counts) if counts is not None else None)
