"""Recurrent word-level language models in plain numpy.

Three input encodings of the predicted word stream (trainable word
embeddings tied with the output projection, letter-trigram count vectors
with no embedding layer, and bag-of-character embeddings), optional
per-layer self-stabilization, forward/backward variants, out-of-vocab
pseudo-scores, and conversation-session conditioning with speaker-change
and overlap input bits. Training is truncated backpropagation through
time with a hand-rolled Adam step, deterministic per seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ConfigError,
    DataError,
    Hypothesis,
    NBestList,
    SENT_BEGIN,
    SENT_END,
    SessionItem,
    SessionTranscript,
    Token,
    UNK_WORD,
    Vocabulary,
)

ENCODINGS = ("word_onehot_tied", "letter_trigram", "character")
DIRECTIONS = ("forward", "backward")
CHECKPOINT_VERSION = 1
CHECKPOINT_KIND = "sausagekit-lstm-lm"
TRIGRAM_BOUNDARY = "#"
UNKNOWN_CHAR = "<unk_char>"
FORGET_BIAS = 1.0

_FAMILY_SHORT = {
    "word_onehot_tied": "word",
    "letter_trigram": "trigram",
    "character": "char",
}


def stabilizer_gain(beta):
    """Softplus-shaped gain (1/4)ln(1 + e^(4 beta)); ~beta for large beta."""
    return 0.25 * np.logaddexp(0.0, 4.0 * np.asarray(beta, dtype=float))


def stabilize(x, beta):
    """Scale every component of x by stabilizer_gain(beta)."""
    return np.asarray(x, dtype=float) * stabilizer_gain(beta)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def word_trigrams(word: str) -> list[str]:
    padded = TRIGRAM_BOUNDARY + word + TRIGRAM_BOUNDARY
    if len(padded) < 3:
        return [padded]
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


@dataclass(frozen=True)
class TrigramInventory:
    """Dense indexing of boundary-padded letter trigrams, sorted order."""

    index: Mapping[str, int]

    @property
    def size(self) -> int:
        return len(self.index)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "TrigramInventory":
        grams = sorted({g for w in words for g in word_trigrams(w)})
        return cls(index={g: i for i, g in enumerate(grams)})


def encode_word_letter_trigram(word: str, inv: TrigramInventory) -> np.ndarray:
    """Count vector over the inventory; trigrams it lacks are dropped."""
    x = np.zeros(inv.size, dtype=float)
    for gram in word_trigrams(word):
        i = inv.index.get(gram)
        if i is not None:
            x[i] += 1.0
    return x


@dataclass(frozen=True)
class CharacterInventory:
    """Boundary and unknown symbols first, then sorted observed characters."""

    index: Mapping[str, int]

    @property
    def size(self) -> int:
        return len(self.index)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "CharacterInventory":
        chars = sorted({c for w in words for c in w} - {TRIGRAM_BOUNDARY})
        entries = [TRIGRAM_BOUNDARY, UNKNOWN_CHAR] + chars
        return cls(index={c: i for i, c in enumerate(entries)})


def word_char_indices(word: str, inv: CharacterInventory) -> tuple[int, ...]:
    unk = inv.index[UNKNOWN_CHAR]
    chars = [TRIGRAM_BOUNDARY] + list(word) + [TRIGRAM_BOUNDARY]
    return tuple(inv.index.get(c, unk) for c in chars)


@dataclass(frozen=True)
class SessionFlags:
    speaker_change: bool = True
    overlap: bool = True

    @property
    def count(self) -> int:
        return int(self.speaker_change) + int(self.overlap)


@dataclass(frozen=True)
class LstmConfig:
    vocab: Vocabulary
    encoding: str = "word_onehot_tied"
    num_layers: int = 2
    hidden_dim: int = 64
    embed_dim: int | None = None
    direction: str = "forward"
    session_mode: bool = False
    session_flags: SessionFlags = field(default_factory=SessionFlags)
    stabilizer: bool = True

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"unknown encoding {self.encoding!r}, expected one of {ENCODINGS}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}, expected one of {DIRECTIONS}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not self.vocab.words:
            raise ConfigError("vocabulary is empty")
        if self.encoding == "letter_trigram":
            if self.embed_dim is not None:
                raise ConfigError("letter_trigram encoding has no embedding layer")
        elif self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.hidden_dim)
        if self.encoding == "word_onehot_tied" and self.embed_dim != self.hidden_dim:
            raise ConfigError(
                f"tied embeddings require embed_dim == hidden_dim, "
                f"got {self.embed_dim} != {self.hidden_dim}"
            )

    @cached_property
    def classes(self) -> tuple[str, ...]:
        """Predicted words: the vocabulary plus the sentence-end and
        unknown symbols, minus the input-only sentence-begin symbol."""
        return tuple(sorted((set(self.vocab.words) - {SENT_BEGIN}) | {SENT_END, UNK_WORD}))

    @cached_property
    def class_index(self) -> Mapping[str, int]:
        return {w: i for i, w in enumerate(self.classes)}

    @cached_property
    def lexical_words(self) -> frozenset[str]:
        return frozenset(set(self.vocab.words) - {SENT_BEGIN, SENT_END, UNK_WORD})

    @cached_property
    def trigram_inventory(self) -> TrigramInventory:
        return TrigramInventory.from_words(sorted(self.lexical_words))

    @cached_property
    def char_inventory(self) -> CharacterInventory:
        return CharacterInventory.from_words(sorted(self.lexical_words))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def flag_count(self) -> int:
        return self.session_flags.count if self.session_mode else 0

    @property
    def base_input_dim(self) -> int:
        if self.encoding == "letter_trigram":
            return self.trigram_inventory.size
        return int(self.embed_dim)

    @property
    def input_dim(self) -> int:
        return self.base_input_dim + self.flag_count

    @property
    def family(self) -> str:
        name = "lstm_" + _FAMILY_SHORT[self.encoding]
        return name + "_session" if self.session_mode else name


@dataclass
class LstmModel:
    """Parameters plus config. Gate rows in each layer's weight matrix are
    stacked [input; forget; candidate; output]; with the tied word
    encoding, output logits are computed against the embedding table's
    transpose, so the tying constraint holds by construction."""

    config: LstmConfig
    params: dict[str, np.ndarray]
    epoch_perplexities: tuple[float, ...] = ()

    def output_matrix(self) -> np.ndarray:
        if self.config.encoding == "word_onehot_tied":
            return self.params["E"]
        return self.params["Wout"]


def _param_shapes(config: LstmConfig) -> dict[str, tuple[int, ...]]:
    H = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {}
    d = config.input_dim
    for layer in range(config.num_layers):
        shapes[f"W{layer}"] = (4 * H, d + H)
        shapes[f"b{layer}"] = (4 * H,)
        d = H
    if config.encoding == "word_onehot_tied":
        shapes["E"] = (config.n_classes, config.embed_dim)
    elif config.encoding == "character":
        shapes["E"] = (config.char_inventory.size, config.embed_dim)
        shapes["Wout"] = (config.n_classes, H)
    else:
        shapes["Wout"] = (config.n_classes, H)
    shapes["bout"] = (config.n_classes,)
    if config.stabilizer:
        shapes["beta"] = (config.num_layers,)
    return shapes


def init_lstm(config: LstmConfig, seed: int = 0, init_scale: float = 0.1) -> LstmModel:
    """Gaussian weights at init_scale (exactly zero when scale is 0),
    zero biases apart from the forget-gate offset, stabilizers at 1."""
    rng = np.random.default_rng(seed)
    H = config.hidden_dim
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(_param_shapes(config).items()):
        if name == "beta":
            params[name] = np.ones(shape, dtype=float)
        elif name.startswith("b"):
            arr = np.zeros(shape, dtype=float)
            if name.startswith("b") and name != "bout":
                arr[H : 2 * H] = FORGET_BIAS
            params[name] = arr
        else:
            params[name] = rng.normal(0.0, 1.0, shape) * init_scale
    return LstmModel(config=config, params=params)


# ---------------------------------------------------------------------------
# input streams


@dataclass(frozen=True)
class _Step:
    """One recurrence step: what is fed in and what, if anything, is
    predicted. kind is "class" (index into E), "feat" (precomputed feature
    vector), "chars" (character indices), or "zero" (boundary input for
    encodings without a word table)."""

    kind: str
    payload: object
    bits: tuple[float, ...]
    target: int | None


def _boundary_step(config: LstmConfig, bits: tuple[float, ...], target: int | None) -> _Step:
    if config.encoding == "word_onehot_tied":
        return _Step("class", config.class_index[SENT_END], bits, target)
    return _Step("zero", None, bits, target)


def _word_step(config: LstmConfig, word: str, bits: tuple[float, ...], target: int | None) -> _Step:
    if config.encoding == "word_onehot_tied":
        idx = config.class_index.get(word, config.class_index[UNK_WORD])
        return _Step("class", idx, bits, target)
    if config.encoding == "letter_trigram":
        return _Step("feat", encode_word_letter_trigram(word, config.trigram_inventory), bits, target)
    return _Step("chars", word_char_indices(word, config.char_inventory), bits, target)


def _flag_bits(config: LstmConfig, speaker_change: float, overlap: float) -> tuple[float, ...]:
    if not config.session_mode:
        return ()
    bits = []
    if config.session_flags.speaker_change:
        bits.append(float(speaker_change))
    if config.session_flags.overlap:
        bits.append(float(overlap))
    return tuple(bits)


def _surfaces(tokens: Sequence) -> list[str]:
    return [t.surface if isinstance(t, Token) else str(t) for t in tokens]


def _oriented(words: list[str], config: LstmConfig) -> list[str]:
    return words[::-1] if config.direction == "backward" else words


def _utterance_chain(
    config: LstmConfig,
    words: list[str],
    speaker_change: float = 0.0,
    overlap: float = 0.0,
    train: bool = False,
) -> tuple[list[_Step], list[int]]:
    """Steps that score one utterance: boundary then each word as input,
    with the following word (finally sentence-end) as target. Returns the
    steps and, for scoring, the positions of out-of-vocab targets.

    In train mode unknown targets map to the unknown class; in score mode
    their positions are reported so the caller can gate them out.
    """
    words = _oriented(words, config)
    index = config.class_index
    unk = index[UNK_WORD]
    targets = [index.get(w, unk) for w in words] + [index[SENT_END]]
    oov_positions = [] if train else [k for k, w in enumerate(words) if w not in index]

    steps = [_boundary_step(config, _flag_bits(config, speaker_change, overlap), targets[0])]
    for k, w in enumerate(words):
        bits = _flag_bits(config, speaker_change if k == 0 else 0.0, overlap)
        steps.append(_word_step(config, w, bits, targets[k + 1]))
    return steps, oov_positions


def _history_steps(config: LstmConfig, history: SessionTranscript | Sequence[SessionItem]) -> list[_Step]:
    """History is consumed without predictions: boundary input at every
    utterance start, then the utterance tokens (reversed within the
    utterance for backward models), each carrying its serialized bits."""
    items = history.items if isinstance(history, SessionTranscript) else tuple(history)
    steps: list[_Step] = []
    for group in _utterance_groups(items):
        first = group[0]
        bits = _flag_bits(config, first.speaker_change, first.overlap)
        steps.append(_boundary_step(config, bits, None))
        ordered = group[::-1] if config.direction == "backward" else group
        for k, item in enumerate(ordered):
            bits = _flag_bits(
                config,
                first.speaker_change if k == 0 else 0.0,
                item.overlap,
            )
            steps.append(_word_step(config, item.token.surface, bits, None))
    return steps


def _utterance_groups(items: Sequence[SessionItem]) -> list[list[SessionItem]]:
    groups: list[list[SessionItem]] = []
    for item in items:
        if item.utterance_boundary or not groups:
            groups.append([])
        groups[-1].append(item)
    return groups


def _input_vector(config: LstmConfig, params: Mapping[str, np.ndarray], step: _Step) -> np.ndarray:
    x = np.zeros(config.input_dim, dtype=float)
    base = config.base_input_dim
    if step.kind == "class":
        x[:base] = params["E"][step.payload]
    elif step.kind == "feat":
        x[:base] = step.payload
    elif step.kind == "chars":
        rows = params["E"][list(step.payload)]
        x[:base] = rows.mean(axis=0)
    for k, bit in enumerate(step.bits):
        x[base + k] = bit
    return x


# ---------------------------------------------------------------------------
# forward / backward passes


def _zero_state(config: LstmConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    H = config.hidden_dim
    return [(np.zeros(H), np.zeros(H)) for _ in range(config.num_layers)]


def _gains(config: LstmConfig, params: Mapping[str, np.ndarray]) -> np.ndarray:
    if config.stabilizer:
        return stabilizer_gain(params["beta"])
    return np.ones(config.num_layers)


def _step_forward(config, params, gains, step, state):
    """Advance one timestep; returns (new_state, top_output)."""
    H = config.hidden_dim
    x = _input_vector(config, params, step)
    new_state = []
    for layer in range(config.num_layers):
        h_prev, c_prev = state[layer]
        xh = np.concatenate([x, h_prev])
        z = params[f"W{layer}"] @ xh + params[f"b{layer}"]
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        c = f * c_prev + i * g
        h = gains[layer] * (o * np.tanh(c))
        new_state.append((h, c))
        x = h
    return new_state, x


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    peak = logits.max()
    stable = logits - peak
    return stable - math.log(np.exp(stable).sum())


def _logits(config, params, top: np.ndarray) -> np.ndarray:
    out = params["E"] if config.encoding == "word_onehot_tied" else params["Wout"]
    return out @ top + params["bout"]


def _run_scoring(model: LstmModel, steps: Sequence[_Step], state=None):
    """Consume steps, collecting a log-probability for each step that has
    a target. Returns (logprobs, final_state)."""
    config, params = model.config, model.params
    gains = _gains(config, params)
    if state is None:
        state = _zero_state(config)
    out: list[float] = []
    for step in steps:
        state, top = _step_forward(config, params, gains, step, state)
        if step.target is not None:
            out.append(float(_log_softmax(_logits(config, params, top))[step.target]))
    return out, state


@dataclass(frozen=True)
class LstmScore:
    """Per-token natural-log probabilities in token order, then the
    end-of-sentence term last; out-of-vocab tokens hold 0.0 and are
    tallied in oov_count instead of being scored."""

    logprobs: tuple[float, ...]
    oov_count: int

    @property
    def total(self) -> float:
        return float(sum(self.logprobs))


def lstm_score(
    model: LstmModel,
    tokens: Sequence,
    history: SessionTranscript | Sequence[SessionItem] | None = None,
    speaker_change: bool = False,
    overlap: bool = False,
) -> LstmScore:
    """Chain-rule scores for one utterance, end-of-sentence included.

    Session-conditioned models consume the history transcript first (state
    carries over) and require one, possibly empty; other models ignore the
    argument. Backward models process the reversed word sequence and the
    output is re-reversed, keeping the end-of-sentence term last.
    """
    config = model.config
    if config.session_mode and history is None:
        raise DataError("session-conditioned model needs a history (may be empty)")
    words = _surfaces(tokens)
    steps, oov_positions = _utterance_chain(
        config, words, speaker_change=float(speaker_change), overlap=float(overlap)
    )
    state = None
    if config.session_mode and history is not None:
        hist = _history_steps(config, history)
        if hist:
            _, state = _run_scoring(model, hist)
    logprobs, _ = _run_scoring(model, steps, state)
    for pos in oov_positions:
        logprobs[pos] = 0.0
    if config.direction == "backward":
        body = logprobs[:-1][::-1]
        logprobs = body + [logprobs[-1]]
    return LstmScore(logprobs=tuple(logprobs), oov_count=len(oov_positions))


def distribution_after(
    model: LstmModel,
    tokens: Sequence,
    history: SessionTranscript | Sequence[SessionItem] | None = None,
) -> np.ndarray:
    """Log distribution over the classes for the position following the
    given (already direction-oriented) prefix. Diagnostic helper."""
    config = model.config
    words = _surfaces(tokens)
    steps = [_boundary_step(config, _flag_bits(config, 0.0, 0.0), None)]
    steps += [_word_step(config, w, _flag_bits(config, 0.0, 0.0), None) for w in words]
    state = None
    if config.session_mode and history is not None:
        hist = _history_steps(config, history)
        if hist:
            _, state = _run_scoring(model, hist)
    gains = _gains(config, model.params)
    if state is None:
        state = _zero_state(config)
    for step in steps:
        state, top = _step_forward(config, model.params, gains, step, state)
    return _log_softmax(_logits(config, model.params, top))


# ---------------------------------------------------------------------------
# training


def _forward_cached(config, params, gains, steps, state):
    """Forward pass keeping every intermediate needed for backprop."""
    H = config.hidden_dim
    caches = []
    nll = 0.0
    n_targets = 0
    for step in steps:
        x = _input_vector(config, params, step)
        layer_caches = []
        inp = x
        new_state = []
        for layer in range(config.num_layers):
            h_prev, c_prev = state[layer]
            xh = np.concatenate([inp, h_prev])
            z = params[f"W{layer}"] @ xh + params[f"b{layer}"]
            i = _sigmoid(z[:H])
            f = _sigmoid(z[H : 2 * H])
            g = np.tanh(z[2 * H : 3 * H])
            o = _sigmoid(z[3 * H :])
            c = f * c_prev + i * g
            tc = np.tanh(c)
            raw = o * tc
            h = gains[layer] * raw
            layer_caches.append((xh, c_prev, i, f, g, o, tc, raw))
            new_state.append((h, c))
            inp = h
        probs = None
        if step.target is not None:
            logp = _log_softmax(_logits(config, params, inp))
            nll -= logp[step.target]
            n_targets += 1
            probs = np.exp(logp)
        caches.append((step, x, layer_caches, inp, probs))
        state = new_state
    return nll, n_targets, caches, state


def _backward_window(config, params, gains, caches, grads):
    """Backpropagate through one cached window; incoming state treated as
    constant (truncation boundary)."""
    H = config.hidden_dim
    L = config.num_layers
    base = config.base_input_dim
    out_name = "E" if config.encoding == "word_onehot_tied" else "Wout"
    dh = [np.zeros(H) for _ in range(L)]
    dc = [np.zeros(H) for _ in range(L)]
    sig4 = _sigmoid(4.0 * params["beta"]) if config.stabilizer else None

    for step, x, layer_caches, top, probs in reversed(caches):
        if probs is not None:
            dlogits = probs.copy()
            dlogits[step.target] -= 1.0
            grads[out_name] += np.outer(dlogits, top)
            grads["bout"] += dlogits
            dtop = params[out_name].T @ dlogits
        else:
            dtop = np.zeros(H)

        dx_above = dtop
        for layer in range(L - 1, -1, -1):
            xh, c_prev, i, f, g, o, tc, raw = layer_caches[layer]
            dy = dx_above + dh[layer]
            if config.stabilizer:
                grads["beta"][layer] += float(dy @ raw) * sig4[layer]
            draw = dy * gains[layer]
            do = draw * tc
            dtc = draw * o
            dcell = dc[layer] + dtc * (1.0 - tc * tc)
            df = dcell * c_prev
            di = dcell * g
            dg = dcell * i
            dc[layer] = dcell * f
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ]
            )
            grads[f"W{layer}"] += np.outer(dz, xh)
            grads[f"b{layer}"] += dz
            dxh = params[f"W{layer}"].T @ dz
            d_in = xh.shape[0] - H
            dx_above = dxh[:d_in]
            dh[layer] = dxh[d_in:]

        dx = dx_above
        if step.kind == "class":
            grads["E"][step.payload] += dx[:base]
        elif step.kind == "chars":
            share = dx[:base] / len(step.payload)
            for ci in step.payload:
                grads["E"][ci] += share


def _sequence_gradients(config, params, gains, steps, grads, unroll):
    """Forward+backward over one step sequence with truncation every
    `unroll` steps (None means no truncation). Returns (nll, n_targets)."""
    state = _zero_state(config)
    window = len(steps) if unroll is None else max(1, int(unroll))
    nll = 0.0
    n_targets = 0
    for start in range(0, len(steps), window):
        chunk = steps[start : start + window]
        wnll, wtargets, caches, state = _forward_cached(config, params, gains, chunk, state)
        _backward_window(config, params, gains, caches, grads)
        nll += wnll
        n_targets += wtargets
    return nll, n_targets


def _training_streams(config: LstmConfig, corpus) -> list[list[_Step]]:
    if config.session_mode:
        streams = []
        for transcript in corpus:
            if not isinstance(transcript, SessionTranscript):
                raise DataError(
                    "session-mode training expects SessionTranscript items, "
                    f"got {type(transcript).__name__}"
                )
            steps: list[_Step] = []
            for group in _utterance_groups(transcript.items):
                first = group[0]
                words = [item.token.surface for item in group]
                chain, _ = _utterance_chain(
                    config,
                    words,
                    speaker_change=float(first.speaker_change),
                    overlap=float(first.overlap),
                    train=True,
                )
                steps.extend(chain)
            if steps:
                streams.append(steps)
        return streams
    streams = []
    for sentence in corpus:
        if isinstance(sentence, SessionTranscript):
            raise DataError("utterance-scoped training expects plain sentences")
        words = _surfaces(sentence)
        chain, _ = _utterance_chain(config, words, train=True)
        streams.append(chain)
    return streams


def _stream_perplexity(config, params, gains, streams) -> float:
    total = 0.0
    count = 0
    for steps in streams:
        state = _zero_state(config)
        for step in steps:
            state, top = _step_forward(config, params, gains, step, state)
            if step.target is not None:
                total += _log_softmax(_logits(config, params, top))[step.target]
                count += 1
    if count == 0:
        raise DataError("no prediction targets in corpus")
    return float(math.exp(-total / count))


@dataclass(frozen=True)
class LstmTrainConfig:
    lr: float = 0.01
    epochs: int = 10
    batch: int = 8
    seed: int = 0
    unroll: int = 32
    init_scale: float = 0.1
    grad_clip: float = 5.0
    stop_ppl: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.unroll < 1:
            raise ConfigError(f"unroll must be >= 1, got {self.unroll}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def loss_and_gradients(model: LstmModel, corpus) -> tuple[float, int, dict[str, np.ndarray]]:
    """Summed negative log-likelihood over the corpus (sentences, or
    SessionTranscripts for session models) and its exact full-backprop
    gradient for every parameter."""
    config, params = model.config, model.params
    gains = _gains(config, params)
    streams = _training_streams(config, corpus)
    if not streams:
        raise DataError("empty training corpus")
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    nll = 0.0
    n_targets = 0
    for steps in streams:
        snll, stargets = _sequence_gradients(config, params, gains, steps, grads, unroll=None)
        nll += snll
        n_targets += stargets
    return float(nll), n_targets, grads


def train_lstm(corpus, config: LstmConfig, hyper: LstmTrainConfig = LstmTrainConfig()) -> LstmModel:
    """Adam on mean negative log-likelihood with truncated
    backpropagation through time; bit-deterministic for a given seed.
    Per-epoch teacher-forced train perplexities end up on the model."""
    streams = _training_streams(config, _materialize(corpus))
    if not streams:
        raise DataError("empty training corpus")

    seeds = np.random.SeedSequence(hyper.seed).spawn(2)
    model = init_lstm(config, seed=_seed_int(seeds[0]), init_scale=hyper.init_scale)
    order_rng = np.random.default_rng(_seed_int(seeds[1]))
    params = model.params
    names = sorted(params)

    m = {n: np.zeros_like(params[n]) for n in names}
    v = {n: np.zeros_like(params[n]) for n in names}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    ppls: list[float] = []

    for _epoch in range(hyper.epochs):
        order = order_rng.permutation(len(streams))
        for lo in range(0, len(order), hyper.batch):
            batch = [streams[k] for k in order[lo : lo + hyper.batch]]
            gains = _gains(config, params)
            grads = {n: np.zeros_like(params[n]) for n in names}
            n_targets = 0
            for steps in batch:
                _, stargets = _sequence_gradients(config, params, gains, steps, grads, hyper.unroll)
                n_targets += stargets
            for n in names:
                grads[n] /= max(1, n_targets)
            norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
            if hyper.grad_clip and norm > hyper.grad_clip:
                scale = hyper.grad_clip / norm
                for n in names:
                    grads[n] *= scale
            t += 1
            for n in names:
                m[n] = beta1 * m[n] + (1 - beta1) * grads[n]
                v[n] = beta2 * v[n] + (1 - beta2) * grads[n] ** 2
                mhat = m[n] / (1 - beta1**t)
                vhat = v[n] / (1 - beta2**t)
                params[n] -= hyper.lr * mhat / (np.sqrt(vhat) + eps)
        ppls.append(_stream_perplexity(config, params, _gains(config, params), streams))
        if hyper.stop_ppl is not None and ppls[-1] < hyper.stop_ppl:
            break

    model.epoch_perplexities = tuple(ppls)
    return model


def _materialize(corpus):
    return list(corpus)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# evaluation and rescoring


def corpus_perplexity_lstm(model: LstmModel, sentences: Sequence[Sequence]) -> float:
    """Teacher-forced perplexity over independent sentences, end-of-
    sentence terms included; out-of-vocab targets are skipped (they are
    pseudo-scored, not modeled)."""
    total = 0.0
    count = 0
    for sentence in sentences:
        history = SessionTranscript(conversation_id="", items=()) if model.config.session_mode else None
        score = lstm_score(model, _surfaces(sentence), history=history)
        total += sum(score.logprobs)
        count += len(score.logprobs) - score.oov_count
    if count == 0:
        raise DataError("nothing to score")
    return float(math.exp(-total / count))


def transcript_perplexity(
    model: LstmModel,
    transcripts: Sequence[SessionTranscript],
    history_transcripts: Sequence[SessionTranscript] | None = None,
    use_history: bool = True,
) -> float:
    """Perplexity over conversations, utterance by utterance.

    Session models condition each utterance on the serialized preceding
    utterances; pass history_transcripts to source that context from a
    different (for example corrupted) rendering of the same conversations,
    or use_history=False to blank it. Utterance-scoped models score every
    utterance independently.
    """
    if history_transcripts is not None and len(history_transcripts) != len(transcripts):
        raise DataError("history transcripts must pair 1:1 with scored transcripts")
    total = 0.0
    count = 0
    for ci, transcript in enumerate(transcripts):
        groups = _utterance_groups(transcript.items)
        hist_items = (
            _utterance_groups(history_transcripts[ci].items)
            if history_transcripts is not None
            else groups
        )
        if history_transcripts is not None and len(hist_items) != len(groups):
            raise DataError(
                f"conversation {transcript.conversation_id!r}: history has "
                f"{len(hist_items)} utterances, transcript has {len(groups)}"
            )
        for k, group in enumerate(groups):
            words = [item.token.surface for item in group]
            if model.config.session_mode:
                prior = [item for g in hist_items[:k] for item in g] if use_history else []
                history = SessionTranscript(
                    conversation_id=transcript.conversation_id, items=tuple(prior)
                )
                score = lstm_score(
                    model,
                    words,
                    history=history,
                    speaker_change=bool(group[0].speaker_change),
                    overlap=bool(group[0].overlap),
                )
            else:
                score = lstm_score(model, words)
            total += sum(score.logprobs)
            count += len(score.logprobs) - score.oov_count
    if count == 0:
        raise DataError("nothing to score")
    return float(math.exp(-total / count))


def combine_bidirectional(fwd_logprob: float, bwd_logprob: float) -> float:
    """Equal-weight log-space average of the two directions."""
    return 0.5 * fwd_logprob + 0.5 * bwd_logprob


def score_nbest_lstm(
    models: Sequence[LstmModel],
    nbest: NBestList,
    history_source: str = "one_best",
    history: SessionTranscript | Sequence[SessionItem] | None = None,
    speaker_change: bool = False,
    overlap: bool = False,
) -> NBestList:
    """Add one sentence-score dimension per model family.

    Models sharing a family (for example a forward/backward pair) are
    averaged with equal weights into a single dimension. history_source
    records whether the supplied history came from reference text or from
    earlier 1-best output; session-conditioned models require a history.
    Existing dimensions and hypothesis order are preserved, and the
    "oov_count" dimension is set from the first model's vocabulary.
    """
    if history_source not in ("one_best", "reference"):
        raise ConfigError(f"history_source must be 'one_best' or 'reference', got {history_source!r}")
    if not models:
        return nbest
    if any(m.config.session_mode for m in models) and history is None:
        raise DataError(f"session-conditioned rescoring of {nbest.utterance_id} needs a history")

    families: dict[str, list[LstmModel]] = {}
    for model in models:
        families.setdefault(model.config.family, []).append(model)

    rescored = []
    for hyp in nbest.hypotheses:
        new_dims: dict[str, float] = {}
        oov: float | None = None
        for family, members in families.items():
            totals = []
            for model in members:
                score = lstm_score(
                    model,
                    hyp.tokens,
                    history=history if model.config.session_mode else None,
                    speaker_change=speaker_change,
                    overlap=overlap,
                )
                totals.append(score.total)
                if oov is None:
                    oov = float(score.oov_count)
            new_dims[family] = float(sum(totals) / len(totals))
        new_dims["oov_count"] = oov if oov is not None else 0.0
        rescored.append(Hypothesis(tokens=hyp.tokens, scores=hyp.scores.updated(**new_dims)))
    return nbest.with_hypotheses(rescored)


# ---------------------------------------------------------------------------
# checkpoints


def save_lstm(model: LstmModel, path) -> None:
    config = model.config
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": CHECKPOINT_KIND,
        "config": {
            "encoding": config.encoding,
            "num_layers": config.num_layers,
            "hidden_dim": config.hidden_dim,
            "embed_dim": config.embed_dim,
            "direction": config.direction,
            "session_mode": config.session_mode,
            "session_flags": {
                "speaker_change": config.session_flags.speaker_change,
                "overlap": config.session_flags.overlap,
            },
            "stabilizer": config.stabilizer,
            "vocab": sorted(config.vocab.words),
            "vocab_counts": dict(sorted(config.vocab.counts.items())) if config.vocab.counts else None,
        },
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(model.params.items())
        },
        "epoch_perplexities": list(model.epoch_perplexities),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_lstm(path) -> LstmModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise DataError(f"{path}: not a model checkpoint (missing version field)")
    if doc["version"] != CHECKPOINT_VERSION or doc.get("kind") != CHECKPOINT_KIND:
        raise DataError(
            f"{path}: unsupported checkpoint "
            f"(version {doc.get('version')!r}, kind {doc.get('kind')!r})"
        )
    raw = doc["config"]
    config = LstmConfig(
        vocab=Vocabulary.from_words(raw["vocab"], counts=raw.get("vocab_counts")),
        encoding=raw["encoding"],
        num_layers=raw["num_layers"],
        hidden_dim=raw["hidden_dim"],
        embed_dim=raw["embed_dim"],
        direction=raw["direction"],
        session_mode=raw["session_mode"],
        session_flags=SessionFlags(**raw["session_flags"]),
        stabilizer=raw["stabilizer"],
    )
    expected = _param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in doc["params"]:
            raise DataError(f"{path}: checkpoint is missing parameter {name!r}")
        entry = doc["params"][name]
        arr = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        if tuple(arr.shape) != shape:
            raise DataError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {shape}")
        params[name] = arr
    return LstmModel(
        config=config,
        params=params,
        epoch_perplexities=tuple(doc.get("epoch_perplexities", ())),
    )
