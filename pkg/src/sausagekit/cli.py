"""Command-line front end.

Exit codes: 0 success, 2 configuration error (bad flags, malformed config
or model files), 3 data error (inconsistent or unusable input data).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import ConfigError, DataError, serialize_session
from .formats import read_sessions, read_stm, write_sessions
from .lstm import (
    ENCODINGS,
    DIRECTIONS,
    LstmConfig,
    LstmTrainConfig,
    SessionFlags,
    corpus_perplexity_lstm,
    load_lstm,
    save_lstm,
    train_lstm,
)
from .ngram import build_vocabulary, corpus_perplexity, read_arpa, train_ngram, write_arpa
from .pipeline import (
    STAGES,
    TOOL_VERSION,
    load_pipeline_config,
    optimize_stage,
    run_cn_rescore,
    run_combine,
    run_report,
    run_rescore,
    run_score,
    run_select,
)


def _read_sentences(path: str) -> list[tuple[str, ...]]:
    sentences = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            words = raw.split()
            if words:
                sentences.append(tuple(words))
    return sentences


def _cmd_train_ngram(args) -> int:
    corpus = _read_sentences(args.train)
    model = train_ngram(corpus, order=args.order, smoothing=args.smoothing)
    write_arpa(model, args.out)
    print(f"wrote {args.out} (order {model.order}, {len(model.vocab.words)} words)")
    return 0


def _cmd_train_lstm(args) -> int:
    if args.session and not args.session_json:
        raise ConfigError("--session training needs --session-json input")
    if args.session_json:
        transcripts = read_sessions(args.train)
        corpus = transcripts
        sentences = [t.surfaces() for t in transcripts]
    else:
        corpus = _read_sentences(args.train)
        sentences = corpus
    vocab = build_vocabulary(sentences, min_count=args.min_count)
    config = LstmConfig(
        vocab=vocab,
        encoding=args.encoding,
        num_layers=args.layers,
        hidden_dim=args.hidden_dim,
        embed_dim=args.embed_dim,
        direction=args.direction,
        session_mode=args.session,
        session_flags=SessionFlags(
            speaker_change=not args.no_speaker_change_flag,
            overlap=not args.no_overlap_flag,
        ),
        stabilizer=not args.no_stabilizer,
    )
    hyper = LstmTrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch=args.batch,
        seed=args.seed,
        unroll=args.unroll,
        init_scale=args.init_scale,
        grad_clip=args.grad_clip,
        stop_ppl=args.stop_ppl,
    )
    model = train_lstm(corpus, config, hyper)
    save_lstm(model, args.out)
    final = model.epoch_perplexities[-1]
    print(f"wrote {args.out} ({len(model.epoch_perplexities)} epochs, train ppl {final:.3f})")
    return 0


def _cmd_ppl(args) -> int:
    sentences = _read_sentences(args.eval)
    if args.arpa:
        value = corpus_perplexity(read_arpa(args.arpa), sentences)
    else:
        value = corpus_perplexity_lstm(load_lstm(args.lstm), sentences)
    print(f"ppl {value:.4f}")
    return 0


def _cmd_session_serialize(args) -> int:
    utterances = read_stm(args.stm)
    by_conv: dict[str, list] = {}
    for utt in utterances:
        by_conv.setdefault(utt.conversation_id, []).append(utt)
    transcripts = [
        serialize_session(
            by_conv[conv],
            speaker_change=not args.no_speaker_change,
            overlap=not args.no_overlap,
        )
        for conv in sorted(by_conv)
    ]
    write_sessions(transcripts, args.out)
    print(f"wrote {args.out} ({len(transcripts)} conversations)")
    return 0


def _cmd_stage(args) -> int:
    config = load_pipeline_config(args.config)
    runner = {
        "rescore": run_rescore,
        "combine": run_combine,
        "cn-rescore": run_cn_rescore,
        "score": run_score,
    }[args.command]
    result = runner(config, seed=args.seed)
    for path in result.outputs:
        print(path)
    if args.command == "score":
        print((config.stage_dir("score") / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def _cmd_optimize(args) -> int:
    config = load_pipeline_config(args.config)
    result = optimize_stage(config, args.stage, seed=args.seed)
    print(f"dev WER {100.0 * result.init_wer:.2f}% -> {100.0 * result.dev_wer:.2f}%")
    print(config.stage_dir(args.stage) / "weights.json")
    return 0


def _cmd_select(args) -> int:
    config = load_pipeline_config(args.config)
    report = run_select(config, seed=args.seed)
    print(f"selected {' '.join(report.chosen)} (dev WER {100.0 * report.chosen_wer:.2f}%)")
    print(config.stage_dir("select") / "selection.json")
    return 0


def _cmd_report(args) -> int:
    config = load_pipeline_config(args.config)
    print(run_report(config).format_table())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sausagekit",
        description="N-best rescoring, confusion-network combination, and WER scoring",
    )
    parser.add_argument("--version", action="version", version=f"sausagekit {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ngram", help="estimate a backoff n-gram LM and write it as ARPA")
    p.add_argument("--train", required=True, help="text corpus, one sentence per line")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--smoothing", default="kneser_ney", choices=["kneser_ney", "add_one", "mle"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_ngram)

    p = sub.add_parser("train-lstm", help="train an LSTM LM and write a JSON checkpoint")
    p.add_argument("--train", required=True, help="text corpus, or session JSON with --session-json")
    p.add_argument("--session-json", action="store_true", help="--train is session-serialize output")
    p.add_argument("--out", required=True)
    p.add_argument("--encoding", default="word_onehot_tied", choices=list(ENCODINGS))
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--direction", default="forward", choices=list(DIRECTIONS))
    p.add_argument("--session", action="store_true", help="condition on conversation history")
    p.add_argument("--no-speaker-change-flag", action="store_true")
    p.add_argument("--no-overlap-flag", action="store_true")
    p.add_argument("--no-stabilizer", action="store_true")
    p.add_argument("--min-count", type=int, default=1, help="vocabulary count threshold")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unroll", type=int, default=32)
    p.add_argument("--init-scale", type=float, default=0.1)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--stop-ppl", type=float, default=None)
    p.set_defaults(func=_cmd_train_lstm)

    p = sub.add_parser("ppl", help="corpus perplexity of an ARPA or LSTM model")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--arpa")
    group.add_argument("--lstm")
    p.add_argument("--eval", required=True, help="text corpus, one sentence per line")
    p.set_defaults(func=_cmd_ppl)

    p = sub.add_parser("session-serialize", help="serialize STM conversations into token streams")
    p.add_argument("--stm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-speaker-change", action="store_true")
    p.add_argument("--no-overlap", action="store_true")
    p.set_defaults(func=_cmd_session_serialize)

    for name, help_text in [
        ("rescore", "attach LM scores to every system's N-best lists"),
        ("combine", "build per-utterance confusion networks and the consensus transcript"),
        ("cn-rescore", "rescore CN-derived N-best lists and emit the final transcript"),
        ("score", "write the per-stage WER report"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=_cmd_stage)

    p = sub.add_parser("optimize", help="re-fit one stage's fusion weights on the dev split")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=[s for s in STAGES if s != "score"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("select", help="search system subsets by combined dev WER")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("report", help="print the per-stage WER table")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
