"""Desk-scale toolkit for the back half of a conversational ASR stack:
N-best rescoring with n-gram and LSTM language models, log-linear score
fusion, confusion-network system combination, consensus decoding, and
NIST-style word error rate scoring."""

from .concom import (
    DEFAULT_BACKCHANNELS,
    NULL_WORD,
    SelectionReport,
    SystemOutput,
    WeightedHypothesis,
    add_backchannel_score,
    build_cn,
    cn_to_nbest,
    combine_systems,
    consensus,
    select_systems,
    weighted_from_nbest,
)
from .core import (
    ConfigError,
    ConfusionNetwork,
    DataError,
    Hypothesis,
    NBestList,
    ScoreVector,
    SessionItem,
    SessionTranscript,
    TimedUtterance,
    Token,
    Vocabulary,
    serialize_session,
    utterance_id,
    validate_cn,
)
from .formats import (
    read_cn,
    read_nbest,
    read_sessions,
    read_stm,
    read_transcript,
    write_cn,
    write_nbest,
    write_sessions,
    write_stm,
    write_transcript,
)
from .fusion import (
    DEFAULT_POSTERIOR_SCALE,
    OptimizeResult,
    PosteriorMatrix,
    WeightVector,
    best_hypothesis,
    combine_scores,
    frame_combine,
    load_weights,
    nbest_posteriors,
    optimize_weights,
    reference_dimension,
    save_weights,
)
from .lstm import (
    LstmConfig,
    LstmModel,
    LstmScore,
    LstmTrainConfig,
    SessionFlags,
    combine_bidirectional,
    corpus_perplexity_lstm,
    distribution_after,
    encode_word_letter_trigram,
    init_lstm,
    load_lstm,
    lstm_score,
    save_lstm,
    score_nbest_lstm,
    stabilize,
    stabilizer_gain,
    train_lstm,
    transcript_perplexity,
    word_trigrams,
)
from .ngram import (
    NGramModel,
    build_vocabulary,
    corpus_perplexity,
    ngram_logprob,
    prune_ngram,
    read_arpa,
    score_hypothesis_ngram,
    score_nbest_ngram,
    sentence_logprob,
    train_ngram,
    write_arpa,
)
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    StageReport,
    load_pipeline_config,
    run_cn_rescore,
    run_combine,
    run_pipeline,
    run_report,
    run_rescore,
    run_score,
    run_select,
)
from .scoring import AlignCosts, Alignment, WerReport, align, oov_rate, perplexity, wer

__version__ = "0.1.0"
