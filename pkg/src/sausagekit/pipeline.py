"""End-to-end driver: per-system rescoring, confusion-network combination,
CN rescoring, and WER reporting, with persisted intermediates.

Stage layout under the configured output directory:

    rescore/<system>.nbest, rescore/weights.json
    combine/cns/<utterance>.cn, combine/consensus.trans, combine/weights.json
    cn_rescore/final.trans, cn_rescore/weights.json
    score/report.json, score/report.txt
    select/selection.json
    manifest.json

Each stage reads only the files earlier stages persisted, so stages can be
rerun independently, and reruns with the same config and seed are
bit-identical. The manifest records, per stage, the content hash of every
file read and written plus the seed; it carries no timestamps.
"""

from __future__ import annotations

import json
import hashlib
import os
import shutil
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from .concom import (
    DEFAULT_BACKCHANNELS,
    SelectionReport,
    SystemOutput,
    add_backchannel_score,
    cn_to_nbest,
    combine_systems,
    consensus,
    select_systems,
)
from .core import (
    DEFAULT_NORM,
    ConfigError,
    DataError,
    NBestList,
    SessionItem,
)
from .formats import (
    read_cn,
    read_nbest,
    read_transcript,
    write_cn,
    write_nbest,
    write_transcript,
)
from .fusion import (
    DEFAULT_POSTERIOR_SCALE,
    OptimizeResult,
    WeightVector,
    best_hypothesis,
    load_weights,
    optimize_weights,
    reference_dimension,
    save_weights,
)
from .lstm import LstmModel, load_lstm, score_nbest_lstm
from .ngram import NGramModel, read_arpa, score_nbest_ngram
from .scoring import wer

TOOL_VERSION = "0.1.0"
STAGES = ("rescore", "combine", "cn_rescore", "score")
MANIFEST_NAME = "manifest.json"
HISTORY_SOURCES = ("one_best", "reference")

_CONFIG_KEYS = frozenset(
    {
        "output_dir",
        "stages",
        "systems",
        "reference",
        "dev_utterances",
        "test_utterances",
        "ngram_lms",
        "lstm_lms",
        "cn_lstm_lms",
        "lstm_history",
        "cn_nbest",
        "backchannel_words",
        "rescore_weights",
        "combine_weights",
        "cn_rescore_weights",
        "posterior_scale",
        "optimizer_restarts",
        "optimizer_max_iters",
    }
)


@dataclass(frozen=True)
class PipelineConfig:
    """Validated run plan; every path is resolved against the config file."""

    base_dir: Path
    output_dir: Path
    stages: tuple[str, ...]
    systems: Mapping[str, Path]
    reference: Path
    dev_utterances: tuple[str, ...] = ()
    test_utterances: tuple[str, ...] = ()
    ngram_lms: tuple[Path, ...] = ()
    lstm_lms: tuple[Path, ...] = ()
    cn_lstm_lms: tuple[Path, ...] = ()
    lstm_history: str = "one_best"
    cn_nbest: int = 100
    backchannel_words: frozenset[str] | None = None
    rescore_weights: Path | None = None
    combine_weights: Path | None = None
    cn_rescore_weights: Path | None = None
    posterior_scale: float = DEFAULT_POSTERIOR_SCALE
    optimizer_restarts: int = 2
    optimizer_max_iters: int = 20

    def stage_dir(self, stage: str) -> Path:
        return self.output_dir / stage


def _want(doc: Mapping, key: str, kinds, default=None, required: bool = False):
    if key not in doc:
        if required:
            raise ConfigError(f"config is missing required key {key!r}")
        return default
    value = doc[key]
    if not isinstance(value, kinds) or isinstance(value, bool) and bool not in (
        kinds if isinstance(kinds, tuple) else (kinds,)
    ):
        raise ConfigError(f"config key {key!r} has the wrong type: {type(value).__name__}")
    return value


def _str_list(doc: Mapping, key: str) -> tuple[str, ...]:
    value = _want(doc, key, list, default=[])
    for item in value:
        if not isinstance(item, str):
            raise ConfigError(f"config key {key!r} must be a list of strings")
    return tuple(value)


def _existing(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def pipeline_config_from_dict(doc: Mapping, base_dir: str | os.PathLike) -> PipelineConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = Path(base_dir).resolve()

    stages = tuple(_str_list(doc, "stages") if "stages" in doc else ())
    if "stages" not in doc:
        raise ConfigError("config is missing required key 'stages'")
    if stages != STAGES[: len(stages)]:
        raise ConfigError(f"stages {list(stages)} is not a prefix of {list(STAGES)}")

    raw_systems = _want(doc, "systems", dict, required=True)
    if not raw_systems:
        raise ConfigError("config key 'systems' must name at least one system")
    systems: dict[str, Path] = {}
    for sid, p in raw_systems.items():
        if not isinstance(sid, str) or not isinstance(p, str):
            raise ConfigError("config key 'systems' must map system ids to file paths")
        systems[sid] = _existing(base / p, f"N-best file for system {sid!r}")

    reference = _existing(base / _want(doc, "reference", str, required=True), "reference transcript")
    output_dir = base / _want(doc, "output_dir", str, required=True)

    dev = _str_list(doc, "dev_utterances")
    test = _str_list(doc, "test_utterances")
    overlap = sorted(set(dev) & set(test))
    if overlap:
        raise ConfigError(f"utterances in both dev and test splits: {overlap}")

    ngram_lms = tuple(_existing(base / p, "ARPA model") for p in _str_list(doc, "ngram_lms"))
    lstm_lms = tuple(_existing(base / p, "LSTM checkpoint") for p in _str_list(doc, "lstm_lms"))
    cn_lstm_lms = tuple(_existing(base / p, "LSTM checkpoint") for p in _str_list(doc, "cn_lstm_lms"))

    lstm_history = _want(doc, "lstm_history", str, default="one_best")
    if lstm_history not in HISTORY_SOURCES:
        raise ConfigError(f"lstm_history must be one of {list(HISTORY_SOURCES)}, got {lstm_history!r}")

    cn_nbest = _want(doc, "cn_nbest", int, default=100)
    if cn_nbest < 1:
        raise ConfigError(f"cn_nbest must be at least 1, got {cn_nbest}")

    backchannel_words = None
    if doc.get("backchannel_words") is not None:
        backchannel_words = frozenset(_str_list(doc, "backchannel_words"))

    def weight_file(key: str) -> Path | None:
        value = _want(doc, key, (str, type(None)))
        return _existing(base / value, f"{key} file") if value is not None else None

    posterior_scale = float(_want(doc, "posterior_scale", (int, float), default=DEFAULT_POSTERIOR_SCALE))
    if not posterior_scale > 0:
        raise ConfigError(f"posterior_scale must be positive, got {posterior_scale}")
    restarts = _want(doc, "optimizer_restarts", int, default=2)
    max_iters = _want(doc, "optimizer_max_iters", int, default=20)
    if restarts < 0 or max_iters < 1:
        raise ConfigError("optimizer_restarts must be >= 0 and optimizer_max_iters >= 1")

    return PipelineConfig(
        base_dir=base,
        output_dir=output_dir,
        stages=stages,
        systems=systems,
        reference=reference,
        dev_utterances=dev,
        test_utterances=test,
        ngram_lms=ngram_lms,
        lstm_lms=lstm_lms,
        cn_lstm_lms=cn_lstm_lms,
        lstm_history=lstm_history,
        cn_nbest=cn_nbest,
        backchannel_words=backchannel_words,
        rescore_weights=weight_file("rescore_weights"),
        combine_weights=weight_file("combine_weights"),
        cn_rescore_weights=weight_file("cn_rescore_weights"),
        posterior_scale=posterior_scale,
        optimizer_restarts=restarts,
        optimizer_max_iters=max_iters,
    )


def load_pipeline_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return pipeline_config_from_dict(doc, path.parent)


# ---------------------------------------------------------------------------
# shared plumbing


@dataclass(frozen=True)
class StageResult:
    stage: str
    outputs: tuple[Path, ...]
    optimized_utterances: tuple[str, ...] = ()


@dataclass(frozen=True)
class PipelineResult:
    stages: Mapping[str, StageResult]
    manifest_path: Path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path, base)).as_posix()


def _update_manifest(config: PipelineConfig, stage: str, inputs, outputs, seed: int) -> Path:
    manifest_path = config.output_dir / MANIFEST_NAME
    doc = {"version": TOOL_VERSION, "stages": {}}
    if manifest_path.is_file():
        try:
            doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: corrupt manifest ({exc})") from exc
        doc["version"] = TOOL_VERSION
        doc.setdefault("stages", {})
    doc["stages"][stage] = {
        "seed": seed,
        "inputs": {_rel(p, config.base_dir): _sha256(p) for p in sorted(set(inputs))},
        "outputs": {_rel(p, config.base_dir): _sha256(p) for p in sorted(set(outputs))},
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def _read_refs(config: PipelineConfig) -> dict[str, tuple[str, ...]]:
    refs: dict[str, tuple[str, ...]] = {}
    for utt_id, words in read_transcript(config.reference):
        if utt_id in refs:
            raise DataError(f"{config.reference}: duplicate reference utterance {utt_id!r}")
        refs[utt_id] = tuple(words)
    return refs


def _load_lists(path: Path) -> dict[str, NBestList]:
    return {nb.utterance_id: nb for nb in read_nbest(path)}


def _rescored_path(config: PipelineConfig, system_id: str) -> Path:
    return config.stage_dir("rescore") / f"{system_id}.nbest"


def _require_file(path: Path, produced_by: str) -> Path:
    if not path.is_file():
        raise DataError(f"{path} is missing; run the {produced_by} stage first")
    return path


def _ngram_registry(config: PipelineConfig) -> list[tuple[str, NGramModel]]:
    registry = []
    for k, path in enumerate(config.ngram_lms):
        dim = "ngram" if k == 0 else f"ngram_{k + 1}"
        registry.append((dim, read_arpa(path)))
    return registry


def _lstm_registry(paths: Sequence[Path]) -> list[LstmModel]:
    return [load_lstm(p) for p in paths]


def _parse_utterance_id(utt_id: str) -> tuple[str, str, int]:
    parts = utt_id.rsplit("_", 2)
    if len(parts) == 3 and parts[2].isdigit():
        return parts[0], parts[1], int(parts[2])
    raise DataError(
        f"utterance id {utt_id!r} does not parse as <conversation>_<speaker>_<onset-ms>; "
        "session-conditioned rescoring needs timed utterance ids"
    )


def _session_histories(
    utt_ids: Sequence[str], words_of: Mapping[str, Sequence[str]]
) -> dict[str, tuple[tuple[SessionItem, ...], bool]]:
    """Per utterance: the serialized earlier words of its conversation, plus
    whether its speaker differs from the previous utterance's.

    Utterances are ordered within a conversation by (onset, speaker, id);
    overlap flags stay 0 because utterance ids carry no end times.
    """
    by_conv: dict[str, list[tuple[int, str, str]]] = {}
    for uid in utt_ids:
        conv, speaker, onset = _parse_utterance_id(uid)
        by_conv.setdefault(conv, []).append((onset, speaker, uid))
    out: dict[str, tuple[tuple[SessionItem, ...], bool]] = {}
    for conv in sorted(by_conv):
        items: list[SessionItem] = []
        prev_speaker: str | None = None
        for onset, speaker, uid in sorted(by_conv[conv]):
            changed = prev_speaker is not None and speaker != prev_speaker
            out[uid] = (tuple(items), changed)
            for j, word in enumerate(words_of[uid]):
                items.append(
                    SessionItem(
                        token=DEFAULT_NORM.make_token(str(word)),
                        speaker_change=int(changed and j == 0),
                        overlap=0,
                        utterance_boundary=int(j == 0),
                    )
                )
            prev_speaker = speaker
    return out


def _check_split(split: Sequence[str], available, what: str) -> None:
    for uid in split:
        if uid not in available:
            raise DataError(f"{what} utterance {uid!r} not found in the data")


def _init_weights(dims, posterior_scale: float) -> WeightVector:
    names = sorted(dims)
    ref = reference_dimension(names)
    return WeightVector({d: (1.0 if d == ref else 0.0) for d in names}, posterior_scale=posterior_scale)


def _resolve_weights(
    config: PipelineConfig,
    stage: str,
    preset: Path | None,
    dev_tuples: Sequence[tuple[NBestList, Sequence]],
    dev_ids: Sequence[str],
    seed: int,
) -> tuple[WeightVector, tuple[str, ...], list[Path]]:
    """Load the stage's preset weight file, or optimize on the dev tuples.

    Returns the weights, the utterance ids the optimizer consumed (empty
    when loading), and the extra input files read.
    """
    if preset is not None:
        return load_weights(preset), (), [preset]
    if not dev_tuples:
        raise ConfigError(
            f"the {stage} stage needs dev_utterances to optimize weights, or a {stage}_weights file"
        )
    init = _init_weights(dev_tuples[0][0].dimensions, config.posterior_scale)
    result = optimize_weights(
        dev_tuples,
        init,
        restarts=config.optimizer_restarts,
        seed=seed,
        max_iters=config.optimizer_max_iters,
    )
    return result.weights, tuple(sorted(set(dev_ids))), [config.reference]


def _dev_tuples(
    lists_by_system: Mapping[str, Mapping[str, NBestList]],
    refs: Mapping[str, Sequence[str]],
    dev_ids: Sequence[str],
) -> list[tuple[NBestList, Sequence[str]]]:
    tuples = []
    for system_id in sorted(lists_by_system):
        lists = lists_by_system[system_id]
        _check_split(dev_ids, lists, "dev")
        _check_split(dev_ids, refs, "dev")
        tuples.extend((lists[uid], refs[uid]) for uid in sorted(dev_ids))
    return tuples


# ---------------------------------------------------------------------------
# stages


def run_rescore(config: PipelineConfig, seed: int = 0) -> StageResult:
    """Attach every registered LM's score dimensions to each system's lists.

    With no LMs registered the inputs are copied byte-for-byte. Fusion
    weights are then optimized on the dev split over the augmented lists
    (or loaded from the preset file) and saved next to the outputs.
    """
    out_dir = config.stage_dir("rescore")
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = list(config.systems.values())
    outputs: list[Path] = []

    ngram_models = _ngram_registry(config)
    lstm_models = _lstm_registry(config.lstm_lms)
    inputs.extend(config.ngram_lms)
    inputs.extend(config.lstm_lms)
    session_mode = any(m.config.session_mode for m in lstm_models)

    refs = _read_refs(config)
    if session_mode and config.lstm_history == "reference":
        inputs.append(config.reference)

    rescored: dict[str, dict[str, NBestList]] = {}
    for system_id in sorted(config.systems):
        in_path = config.systems[system_id]
        out_path = _rescored_path(config, system_id)
        if not ngram_models and not lstm_models:
            shutil.copyfile(in_path, out_path)
            outputs.append(out_path)
            rescored[system_id] = _load_lists(out_path)
            continue
        lists = _load_lists(in_path)
        histories = None
        if session_mode:
            if config.lstm_history == "reference":
                _check_split(sorted(lists), refs, "history")
                words_of = {uid: refs[uid] for uid in lists}
            else:
                words_of = {uid: lists[uid].hypotheses[0].surfaces() for uid in lists}
            histories = _session_histories(sorted(lists), words_of)
        done = {}
        for uid in sorted(lists):
            nb = lists[uid]
            if lstm_models:
                history, changed = histories[uid] if histories is not None else ((), False)
                nb = score_nbest_lstm(
                    lstm_models,
                    nb,
                    history_source=config.lstm_history,
                    history=history if session_mode else None,
                    speaker_change=changed,
                )
            for k, (dim, model) in enumerate(ngram_models):
                nb = score_nbest_ngram(model, nb, dimension=dim, with_counts=(k == 0))
            done[uid] = nb
        write_nbest([done[uid] for uid in sorted(done)], out_path)
        outputs.append(out_path)
        rescored[system_id] = done

    dev_tuples = _dev_tuples(rescored, refs, config.dev_utterances)
    weights, optimized, extra = _resolve_weights(
        config, "rescore", config.rescore_weights, dev_tuples, config.dev_utterances, seed
    )
    weights_path = out_dir / "weights.json"
    save_weights(weights, weights_path)
    outputs.append(weights_path)
    inputs.extend(extra)

    _update_manifest(config, "rescore", inputs, outputs, seed)
    return StageResult("rescore", tuple(outputs), optimized)


def run_combine(config: PipelineConfig, seed: int = 0) -> StageResult:
    """Turn the rescored systems into one confusion network per utterance
    and read off the consensus transcript."""
    out_dir = config.stage_dir("combine")
    (out_dir / "cns").mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = []
    outputs: list[Path] = []

    lists_by_system: dict[str, dict[str, NBestList]] = {}
    for system_id in sorted(config.systems):
        path = _require_file(_rescored_path(config, system_id), "rescore")
        inputs.append(path)
        lists_by_system[system_id] = _load_lists(path)

    refs = _read_refs(config)
    dev_tuples = _dev_tuples(lists_by_system, refs, config.dev_utterances)
    weights, optimized, extra = _resolve_weights(
        config, "combine", config.combine_weights, dev_tuples, config.dev_utterances, seed
    )
    inputs.extend(extra)

    systems = [SystemOutput(sid, lists_by_system[sid]) for sid in sorted(lists_by_system)]
    utt_ids = sorted(set().union(*(s.lists.keys() for s in systems)))
    entries = []
    for uid in utt_ids:
        if "/" in uid or uid in (".", ".."):
            raise DataError(f"utterance id {uid!r} is not usable as a file name")
        cn = combine_systems(systems, uid, weights)
        cn_path = out_dir / "cns" / f"{uid}.cn"
        write_cn(cn, cn_path)
        outputs.append(cn_path)
        entries.append((uid, [t.surface for t in consensus(cn)]))

    consensus_path = out_dir / "consensus.trans"
    write_transcript(entries, consensus_path)
    outputs.append(consensus_path)
    weights_path = out_dir / "weights.json"
    save_weights(weights, weights_path)
    outputs.append(weights_path)

    _update_manifest(config, "combine", inputs, outputs, seed)
    return StageResult("combine", tuple(outputs), optimized)


def _load_cns(config: PipelineConfig) -> tuple[dict[str, Path], list]:
    cn_dir = config.stage_dir("combine") / "cns"
    if not cn_dir.is_dir():
        raise DataError(f"{cn_dir} is missing; run the combine stage first")
    paths = sorted(cn_dir.glob("*.cn"))
    if not paths:
        raise DataError(f"{cn_dir} holds no confusion networks; run the combine stage first")
    cns = [read_cn(p) for p in paths]
    return {cn.utterance_id: p for cn, p in zip(cns, paths)}, cns


def _cn_scored_lists(config: PipelineConfig) -> tuple[dict[str, NBestList], list[Path]]:
    """Regenerate N-best lists from the persisted confusion networks and
    attach the CN-rescoring knowledge sources."""
    cn_paths, cns = _load_cns(config)
    inputs = list(cn_paths.values())

    ngram_models = _ngram_registry(config)
    lstm_models = _lstm_registry(config.cn_lstm_lms)
    inputs.extend(config.ngram_lms)
    inputs.extend(config.cn_lstm_lms)
    lexicon = config.backchannel_words if config.backchannel_words is not None else DEFAULT_BACKCHANNELS

    histories = None
    session_mode = any(m.config.session_mode for m in lstm_models)
    if session_mode:
        consensus_path = _require_file(config.stage_dir("combine") / "consensus.trans", "combine")
        inputs.append(consensus_path)
        words_of = dict(read_transcript(consensus_path))
        _check_split([cn.utterance_id for cn in cns], words_of, "history")
        histories = _session_histories([cn.utterance_id for cn in cns], words_of)

    scored: dict[str, NBestList] = {}
    for cn in cns:
        nb = cn_to_nbest(cn, config.cn_nbest)
        if lstm_models:
            history, changed = histories[cn.utterance_id] if histories is not None else ((), False)
            nb = score_nbest_lstm(
                lstm_models,
                nb,
                history_source=config.lstm_history,
                history=history if session_mode else None,
                speaker_change=changed,
            )
        for k, (dim, model) in enumerate(ngram_models):
            nb = score_nbest_ngram(model, nb, dimension=dim, with_counts=(k == 0))
        nb = add_backchannel_score(nb, lexicon)
        scored[cn.utterance_id] = nb
    return scored, inputs


def run_cn_rescore(config: PipelineConfig, seed: int = 0) -> StageResult:
    """Rescore the confusion networks' regenerated N-best lists and emit
    the final 1-best transcript.

    The CN posterior acts as the base score dimension; the n-gram models,
    the configured LSTM subset, and the backchannel count are fused on top.
    """
    out_dir = config.stage_dir("cn_rescore")
    out_dir.mkdir(parents=True, exist_ok=True)
    scored, inputs = _cn_scored_lists(config)

    refs = _read_refs(config)
    dev_ids = [uid for uid in config.dev_utterances]
    _check_split(dev_ids, scored, "dev")
    _check_split(dev_ids, refs, "dev")
    dev_tuples = [(scored[uid], refs[uid]) for uid in sorted(dev_ids)]
    weights, optimized, extra = _resolve_weights(
        config, "cn_rescore", config.cn_rescore_weights, dev_tuples, dev_ids, seed
    )
    inputs.extend(extra)

    entries = []
    for uid in sorted(scored):
        _, hyp = best_hypothesis(scored[uid], weights)
        entries.append((uid, list(hyp.surfaces())))
    final_path = out_dir / "final.trans"
    write_transcript(entries, final_path)
    weights_path = out_dir / "weights.json"
    save_weights(weights, weights_path)

    outputs = [final_path, weights_path]
    _update_manifest(config, "cn_rescore", inputs, outputs, seed)
    return StageResult("cn_rescore", tuple(outputs), optimized)


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class ReportRow:
    stage: str
    wer: Mapping[str, float]

    @property
    def best(self) -> float:
        return min(self.wer.values())


@dataclass(frozen=True)
class StageReport:
    """WER per system at each completed stage, on the evaluation split."""

    columns: tuple[str, ...]
    rows: tuple[ReportRow, ...]
    split: tuple[str, ...]

    def to_json(self) -> str:
        doc = {
            "columns": list(self.columns),
            "split": list(self.split),
            "rows": [
                {"stage": r.stage, "wer": dict(sorted(r.wer.items())), "best": r.best}
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        name_w = max([len("stage")] + [len(r.stage) for r in self.rows])
        widths = {c: max(len(c), 8) for c in self.columns}
        lines = [" ".join(["stage".ljust(name_w)] + [c.rjust(widths[c]) for c in self.columns])]
        for r in self.rows:
            cells = [
                (f"{100.0 * r.wer[c]:.2f}%" if c in r.wer else "-").rjust(widths[c])
                for c in self.columns
            ]
            lines.append(" ".join([r.stage.ljust(name_w)] + cells))
        return "\n".join(lines)


def _report_inputs_and_rows(config: PipelineConfig):
    refs = _read_refs(config)
    inputs: list[Path] = [config.reference]
    originals: dict[str, dict[str, NBestList]] = {}
    for system_id in sorted(config.systems):
        inputs.append(config.systems[system_id])
        originals[system_id] = _load_lists(config.systems[system_id])

    all_ids = sorted(set().union(*(set(v) for v in originals.values())))
    split = list(config.test_utterances) if config.test_utterances else all_ids
    for lists in originals.values():
        _check_split(split, lists, "evaluation")
    _check_split(split, refs, "evaluation")
    sub_refs = {uid: refs[uid] for uid in split}

    stage_rows = [s for s in config.stages if s != "score"]
    rows: list[ReportRow] = []
    columns = sorted(config.systems)
    if any(s in ("combine", "cn_rescore") for s in stage_rows):
        columns = columns + ["combination"]

    if config.stages:
        row = {}
        for system_id, lists in originals.items():
            hyps = {uid: lists[uid].hypotheses[0].surfaces() for uid in split}
            row[system_id] = wer(sub_refs, hyps).wer
        rows.append(ReportRow("baseline", row))

    for stage in stage_rows:
        if stage == "rescore":
            weights = load_weights(_require_file(config.stage_dir("rescore") / "weights.json", "rescore"))
            inputs.append(config.stage_dir("rescore") / "weights.json")
            row = {}
            for system_id in sorted(config.systems):
                path = _require_file(_rescored_path(config, system_id), "rescore")
                inputs.append(path)
                lists = _load_lists(path)
                _check_split(split, lists, "evaluation")
                hyps = {uid: best_hypothesis(lists[uid], weights)[1].surfaces() for uid in split}
                row[system_id] = wer(sub_refs, hyps).wer
            rows.append(ReportRow("rescore", row))
        elif stage in ("combine", "cn_rescore"):
            name = "consensus.trans" if stage == "combine" else "final.trans"
            path = _require_file(config.stage_dir(stage) / name, stage)
            inputs.append(path)
            trans = dict(read_transcript(path))
            _check_split(split, trans, "evaluation")
            hyps = {uid: trans[uid] for uid in split}
            rows.append(ReportRow(stage, {"combination": wer(sub_refs, hyps).wer}))

    report = StageReport(columns=tuple(columns), rows=tuple(rows), split=tuple(split))
    return report, inputs


def run_report(config: PipelineConfig) -> StageReport:
    """Compute the per-stage WER table from the persisted artifacts."""
    report, _ = _report_inputs_and_rows(config)
    return report


def run_score(config: PipelineConfig, seed: int = 0) -> StageResult:
    """Persist the per-stage WER table in JSON and text form."""
    report, inputs = _report_inputs_and_rows(config)
    out_dir = config.stage_dir("score")
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    json_path.write_text(report.to_json(), encoding="utf-8")
    text_path.write_text(report.format_table() + "\n", encoding="utf-8")
    outputs = [json_path, text_path]
    _update_manifest(config, "score", inputs, outputs, seed)
    return StageResult("score", tuple(outputs))


_STAGE_RUNNERS = {
    "rescore": run_rescore,
    "combine": run_combine,
    "cn_rescore": run_cn_rescore,
    "score": run_score,
}


def run_pipeline(config: PipelineConfig, seed: int = 0) -> PipelineResult:
    """Run the configured stage prefix in order."""
    results: dict[str, StageResult] = {}
    for stage in config.stages:
        results[stage] = _STAGE_RUNNERS[stage](config, seed)
    return PipelineResult(stages=results, manifest_path=config.output_dir / MANIFEST_NAME)


# ---------------------------------------------------------------------------
# standalone tuning and system selection


def optimize_stage(config: PipelineConfig, stage: str, seed: int = 0) -> OptimizeResult:
    """Re-fit one stage's fusion weights on the dev split from the persisted
    stage inputs, overwriting that stage's weights.json."""
    if stage not in ("rescore", "combine", "cn_rescore"):
        raise ConfigError(f"no weights to optimize for stage {stage!r}")
    if not config.dev_utterances:
        raise ConfigError("weight optimization needs dev_utterances")
    refs = _read_refs(config)
    if stage in ("rescore", "combine"):
        lists_by_system = {
            sid: _load_lists(_require_file(_rescored_path(config, sid), "rescore"))
            for sid in sorted(config.systems)
        }
        dev_tuples = _dev_tuples(lists_by_system, refs, config.dev_utterances)
    else:
        scored, _ = _cn_scored_lists(config)
        dev_ids = sorted(config.dev_utterances)
        _check_split(dev_ids, scored, "dev")
        _check_split(dev_ids, refs, "dev")
        dev_tuples = [(scored[uid], refs[uid]) for uid in dev_ids]
    init = _init_weights(dev_tuples[0][0].dimensions, config.posterior_scale)
    result = optimize_weights(
        dev_tuples,
        init,
        restarts=config.optimizer_restarts,
        seed=seed,
        max_iters=config.optimizer_max_iters,
    )
    out_dir = config.stage_dir(stage)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(result.weights, out_dir / "weights.json")
    return result


def run_select(config: PipelineConfig, seed: int = 0) -> SelectionReport:
    """Pick the subset of systems whose combined consensus scores best on
    the dev split, and persist the search report.

    Uses the rescored lists when the rescore stage has run for every
    system, the raw inputs otherwise; weights come from the preset
    combine_weights file or the combine stage's saved weights.
    """
    if not config.dev_utterances:
        raise ConfigError("system selection needs dev_utterances")
    rescored = [_rescored_path(config, sid) for sid in sorted(config.systems)]
    if all(p.is_file() for p in rescored):
        paths = {sid: _rescored_path(config, sid) for sid in config.systems}
    else:
        paths = dict(config.systems)
    if config.combine_weights is not None:
        weights_path = config.combine_weights
    else:
        weights_path = config.stage_dir("combine") / "weights.json"
        if not weights_path.is_file():
            raise ConfigError(
                "system selection needs combination weights; run the combine stage "
                "or set combine_weights"
            )
    weights = load_weights(weights_path)
    inputs = [*paths.values(), weights_path, config.reference]

    refs = _read_refs(config)
    _check_split(config.dev_utterances, refs, "dev")
    dev_ids = sorted(set(config.dev_utterances))
    candidates = []
    for sid in sorted(paths):
        lists = _load_lists(paths[sid])
        _check_split(dev_ids, lists, "dev")
        candidates.append(SystemOutput(sid, {uid: lists[uid] for uid in dev_ids}))
    dev_refs = {uid: refs[uid] for uid in dev_ids}
    report = select_systems(candidates, dev_refs, weights)

    out_dir = config.stage_dir("select")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "selection.json"
    out_path.write_text(report.to_json() + "\n", encoding="utf-8")
    _update_manifest(config, "select", inputs, [out_path], seed)
    return report
