"""Line-oriented interchange formats for N-best lists, confusion networks,
and STM-like references.

N-best lines:   ``<utt_id> <system_id> <k> <dim1=val1> ... <dimM=valM> | w1 ... wn``
                (UTF-8, natural-log values, dimension names sorted)
CN files:       ``utt <utt_id> numbins <B>`` header, then ``bin <i> <word> <posterior>``
                records with posteriors at 12 significant digits.
References:     ``<conv_id> <channel> <onset> <end> <word...>``
"""

from __future__ import annotations

import io
import json
import os
from typing import Iterable, Sequence

from .core import (
    ConfusionNetwork,
    DataError,
    DEFAULT_NORM,
    Hypothesis,
    NBestList,
    NormConfig,
    ScoreVector,
    SessionItem,
    SessionTranscript,
    TimedUtterance,
    tokens_from_surfaces,
)


def _fmt_score(value: float) -> str:
    if value == float("-inf"):
        return "-inf"
    return repr(value)


def format_nbest_line(utt_id: str, system_id: str, rank: int, hyp: Hypothesis) -> str:
    fields = [utt_id, system_id, str(rank)]
    fields.extend(f"{name}={_fmt_score(hyp.scores[name])}" for name in sorted(hyp.scores))
    fields.append("|")
    fields.extend(hyp.surfaces())
    return " ".join(fields)


def write_nbest(lists: Iterable[NBestList], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for nbest in lists:
            for rank, hyp in enumerate(nbest.hypotheses):
                f.write(format_nbest_line(nbest.utterance_id, nbest.system_id, rank, hyp) + "\n")


def parse_nbest_line(line: str, lineno: int, config: NormConfig) -> tuple[str, str, int, Hypothesis]:
    if " | " in line:
        head, words_part = line.split(" | ", 1)
    elif line.endswith(" |"):
        head, words_part = line[:-2], ""
    else:
        raise DataError(f"line {lineno}: missing ' | ' separator")
    fields = head.split()
    if len(fields) < 3:
        raise DataError(f"line {lineno}: expected '<utt> <system> <k> dims...'")
    utt_id, system_id, rank_str = fields[0], fields[1], fields[2]
    try:
        rank = int(rank_str)
    except ValueError:
        raise DataError(f"line {lineno}: rank {rank_str!r} is not an integer") from None
    entries = {}
    for item in fields[3:]:
        if "=" not in item:
            raise DataError(f"line {lineno}: bad score field {item!r}")
        name, value = item.split("=", 1)
        try:
            entries[name] = float(value)
        except ValueError:
            raise DataError(f"line {lineno}: bad score value {item!r}") from None
    tokens = tokens_from_surfaces(words_part.split(), config)
    return utt_id, system_id, rank, Hypothesis(tokens=tokens, scores=ScoreVector(entries))


def read_nbest(path: str | os.PathLike, config: NormConfig = DEFAULT_NORM) -> list[NBestList]:
    """Read N-best lists, grouping id-prefixed lines by (utterance, system).

    Ranks must be contiguous from 0 within each group; groups appear in
    first-seen order.
    """
    groups: dict[tuple[str, str], list[Hypothesis]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            utt_id, system_id, rank, hyp = parse_nbest_line(line, lineno, config)
            bucket = groups.setdefault((utt_id, system_id), [])
            if rank != len(bucket):
                raise DataError(f"line {lineno}: rank {rank} out of order for {utt_id}/{system_id}")
            bucket.append(hyp)
    return [
        NBestList(utterance_id=utt, system_id=sys_id, hypotheses=tuple(hyps))
        for (utt, sys_id), hyps in groups.items()
    ]


def write_cn(cn: ConfusionNetwork, path_or_file) -> None:
    own = isinstance(path_or_file, (str, os.PathLike))
    f = open(path_or_file, "w", encoding="utf-8") if own else path_or_file
    try:
        f.write(f"utt {cn.utterance_id} numbins {len(cn.bins)}\n")
        for i, b in enumerate(cn.bins):
            for word in sorted(b):
                f.write(f"bin {i} {word} {b[word]:.12g}\n")
    finally:
        if own:
            f.close()


def cn_to_text(cn: ConfusionNetwork) -> str:
    buf = io.StringIO()
    write_cn(cn, buf)
    return buf.getvalue()


def read_cn(path: str | os.PathLike) -> ConfusionNetwork:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("utt "):
        raise DataError(f"{path}: missing 'utt' header")
    header = lines[0].split()
    if len(header) != 4 or header[2] != "numbins":
        raise DataError(f"{path}: malformed header {lines[0]!r}")
    utt_id, num_bins = header[1], int(header[3])
    bins: list[dict[str, float]] = [{} for _ in range(num_bins)]
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 4 or fields[0] != "bin":
            raise DataError(f"{path} line {lineno}: malformed bin record")
        idx = int(fields[1])
        if not 0 <= idx < num_bins:
            raise DataError(f"{path} line {lineno}: bin index {idx} out of range")
        bins[idx][fields[2]] = float(fields[3])
    return ConfusionNetwork(utterance_id=utt_id, bins=tuple(bins))


def write_stm(utterances: Iterable[TimedUtterance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt in utterances:
            words = " ".join(t.surface for t in utt.tokens)
            f.write(f"{utt.conversation_id} {utt.speaker} {utt.onset:g} {utt.end:g} {words}".rstrip() + "\n")


def read_stm(path: str | os.PathLike, config: NormConfig = DEFAULT_NORM) -> list[TimedUtterance]:
    utterances = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith(";;"):
                continue
            fields = line.split()
            if len(fields) < 4:
                raise DataError(f"{path} line {lineno}: expected '<conv> <channel> <onset> <end> ...'")
            try:
                onset, end = float(fields[2]), float(fields[3])
            except ValueError:
                raise DataError(f"{path} line {lineno}: bad times {fields[2]!r} {fields[3]!r}") from None
            utterances.append(
                TimedUtterance(
                    conversation_id=fields[0],
                    speaker=fields[1],
                    onset=onset,
                    end=end,
                    tokens=tokens_from_surfaces(fields[4:], config),
                )
            )
    return utterances


def write_transcript(entries: Sequence[tuple[str, Sequence[str]]], path: str | os.PathLike) -> None:
    """Write consensus/1-best output: one ``<utt_id> w1 ... wn`` line each."""
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, words in entries:
            f.write(f"{utt_id} {' '.join(words)}".rstrip() + "\n")


def read_transcript(path: str | os.PathLike) -> list[tuple[str, tuple[str, ...]]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            entries.append((fields[0], tuple(fields[1:])))
    return entries


def write_sessions(transcripts: Sequence[SessionTranscript], path: str | os.PathLike) -> None:
    """JSON list of conversations, each a flat token stream with flag bits."""
    doc = [
        {
            "conversation_id": t.conversation_id,
            "items": [
                {
                    "token": item.token.surface,
                    "speaker_change": item.speaker_change,
                    "overlap": item.overlap,
                    "utterance_boundary": item.utterance_boundary,
                }
                for item in t.items
            ],
        }
        for t in transcripts
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_sessions(path: str | os.PathLike, config: NormConfig = DEFAULT_NORM) -> list[SessionTranscript]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, list):
        raise DataError(f"{path}: expected a JSON list of conversations")
    transcripts = []
    for k, entry in enumerate(doc):
        if not isinstance(entry, dict) or "conversation_id" not in entry or "items" not in entry:
            raise DataError(f"{path}: conversation {k} needs conversation_id and items")
        items = tuple(
            SessionItem(
                token=config.make_token(str(item["token"])),
                speaker_change=int(item.get("speaker_change", 0)),
                overlap=int(item.get("overlap", 0)),
                utterance_boundary=int(item.get("utterance_boundary", 0)),
            )
            for item in entry["items"]
        )
        transcripts.append(SessionTranscript(conversation_id=str(entry["conversation_id"]), items=items))
    return transcripts
