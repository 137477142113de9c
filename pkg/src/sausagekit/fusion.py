"""Log-linear score fusion: weighted combination of hypothesis scores,
utterance-level posterior estimation, frame-level posterior combination,
and grid-based weight optimization against corpus WER.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .core import ConfigError, DataError, Hypothesis, NBestList
from .scoring import AlignCosts, align

DEFAULT_POSTERIOR_SCALE = 0.05
SCALE_KEY = "__posterior_scale"
GRID_POINTS = 41


@dataclass(frozen=True)
class WeightVector(Mapping[str, float]):
    """Per-dimension fusion weights plus the posterior softmax scale."""

    weights: Mapping[str, float]
    posterior_scale: float = DEFAULT_POSTERIOR_SCALE

    def __post_init__(self):
        if not self.posterior_scale > 0:
            raise ConfigError(f"posterior_scale must be positive, got {self.posterior_scale}")
        cleaned = {}
        for name, value in dict(self.weights).items():
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError(f"weight {name} must be finite, got {value}")
            cleaned[name] = value
        object.__setattr__(self, "weights", cleaned)

    def __getitem__(self, name: str) -> float:
        return self.weights[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.weights)

    def __len__(self) -> int:
        return len(self.weights)

    def updated(self, **weights: float) -> "WeightVector":
        merged = dict(self.weights)
        merged.update(weights)
        return WeightVector(merged, posterior_scale=self.posterior_scale)

    def with_scale(self, posterior_scale: float) -> "WeightVector":
        return WeightVector(dict(self.weights), posterior_scale=posterior_scale)


def save_weights(w: WeightVector, path: str | os.PathLike) -> None:
    doc = {name: w[name] for name in sorted(w)}
    doc[SCALE_KEY] = w.posterior_scale
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_weights(path: str | os.PathLike) -> WeightVector:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    scale = doc.pop(SCALE_KEY, DEFAULT_POSTERIOR_SCALE)
    return WeightVector(doc, posterior_scale=scale)


def combine_scores(hyp: Hypothesis, w: WeightVector) -> float:
    """Weighted sum over every score dimension the hypothesis carries.

    Every dimension must have a weight; hard-zero scores (-inf) require a
    positive weight to stay interpretable as log-probabilities.
    """
    total = 0.0
    for name, score in hyp.scores.items():
        try:
            weight = w[name]
        except KeyError:
            raise ConfigError(f"no weight for score dimension {name!r}") from None
        if score == float("-inf"):
            if weight > 0:
                return float("-inf")
            if weight == 0:
                continue
            raise DataError(f"negative weight on hard-zero score {name!r}")
        total += weight * score
    return total


def combined_score_matrix(nbest: NBestList, w: WeightVector) -> np.ndarray:
    return np.array([combine_scores(h, w) for h in nbest.hypotheses], dtype=np.float64)


def nbest_posteriors(nbest: NBestList, w: WeightVector) -> np.ndarray:
    """Softmax over combined scores at temperature posterior_scale."""
    scores = combined_score_matrix(nbest, w) * w.posterior_scale
    peak = scores.max()
    if peak == float("-inf"):
        raise DataError(f"all hypotheses of {nbest.utterance_id} have zero probability")
    exp = np.exp(scores - peak)
    return exp / exp.sum()


def best_hypothesis(nbest: NBestList, w: WeightVector) -> tuple[int, Hypothesis]:
    """Argmax hypothesis under the combined score; ties keep the lowest rank."""
    scores = combined_score_matrix(nbest, w)
    k = int(np.argmax(scores))
    return k, nbest.hypotheses[k]


@dataclass(frozen=True)
class PosteriorMatrix:
    """Frames x classes posterior matrix from one acoustic model."""

    senone_set_id: str
    matrix: np.ndarray
    ROW_TOL = 1e-6

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.size == 0:
            raise DataError(f"posterior matrix must be 2-D and non-empty, got shape {m.shape}")
        if (m < 0).any() or (m > 1).any():
            raise DataError("posterior entries must lie in [0, 1]")
        residual = np.abs(m.sum(axis=1) - 1.0)
        if (residual > self.ROW_TOL).any():
            worst = int(residual.argmax())
            raise DataError(f"row {worst} sums to {m[worst].sum():.9f}, not 1")
        object.__setattr__(self, "matrix", m)

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]


def frame_combine(
    inputs: Sequence[PosteriorMatrix],
    weights: Sequence[float] | None = None,
    mode: str = "arithmetic",
) -> PosteriorMatrix:
    """Row-wise weighted mean of senone posteriors, renormalized.

    In "log" mode the weighted mean is taken in the log domain (a
    geometric mean for equal weights). All inputs must come from the same
    senone inventory.
    """
    if not inputs:
        raise DataError("no posterior matrices to combine")
    set_id = inputs[0].senone_set_id
    shape = inputs[0].matrix.shape
    for pm in inputs[1:]:
        if pm.senone_set_id != set_id:
            raise DataError(f"senone set mismatch: {pm.senone_set_id!r} vs {set_id!r}")
        if pm.matrix.shape != shape:
            raise DataError(f"shape mismatch: {pm.matrix.shape} vs {shape}")
    if weights is None:
        weights = [1.0] * len(inputs)
    if len(weights) != len(inputs):
        raise ConfigError(f"{len(weights)} weights for {len(inputs)} inputs")
    wv = np.asarray(weights, dtype=np.float64)
    if (wv < 0).any() or wv.sum() <= 0:
        raise ConfigError("weights must be non-negative with positive sum")
    wv = wv / wv.sum()

    stack = np.stack([pm.matrix for pm in inputs])
    if mode == "arithmetic":
        combined = np.einsum("k,kfc->fc", wv, stack)
    elif mode == "log":
        with np.errstate(divide="ignore"):
            combined = np.exp(np.einsum("k,kfc->fc", wv, np.log(stack)))
    else:
        raise ConfigError(f"unknown frame combination mode {mode!r}")
    combined = combined / combined.sum(axis=1, keepdims=True)
    return PosteriorMatrix(senone_set_id=set_id, matrix=combined)


_MAGIC_BINARY = b"skpm1b"
_MAGIC_TEXT = b"skpm1t"


def write_posteriors(pm: PosteriorMatrix, path: str | os.PathLike, binary: bool = True) -> None:
    header = f" {pm.senone_set_id} {pm.n_frames} {pm.n_classes}\n"
    with open(path, "wb") as f:
        if binary:
            f.write(_MAGIC_BINARY + header.encode())
            f.write(pm.matrix.astype("<f8").tobytes(order="C"))
        else:
            f.write(_MAGIC_TEXT + header.encode())
            for row in pm.matrix:
                f.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode())


def read_posteriors(path: str | os.PathLike) -> PosteriorMatrix:
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic not in (_MAGIC_BINARY, _MAGIC_TEXT):
            raise DataError(f"{path}: not a posterior matrix file")
        header = f.readline().decode().split()
        if len(header) != 3:
            raise DataError(f"{path}: malformed posterior header")
        set_id, n_frames, n_classes = header[0], int(header[1]), int(header[2])
        if magic == _MAGIC_BINARY:
            raw = f.read(8 * n_frames * n_classes)
            if len(raw) != 8 * n_frames * n_classes:
                raise DataError(f"{path}: truncated posterior payload")
            m = np.frombuffer(raw, dtype="<f8").reshape(n_frames, n_classes).copy()
        else:
            m = np.loadtxt(f, dtype=np.float64, ndmin=2)
            if m.shape != (n_frames, n_classes):
                raise DataError(f"{path}: payload shape {m.shape} contradicts header")
    return PosteriorMatrix(senone_set_id=set_id, matrix=m)


def reference_dimension(dimensions: Sequence[str]) -> str:
    """The weight frozen for identifiability: the acoustic score when
    present, else the CN posterior, else the lexicographically first."""
    if "am" in dimensions:
        return "am"
    if "cn_posterior" in dimensions:
        return "cn_posterior"
    return sorted(dimensions)[0]


@dataclass
class OptimizeResult:
    weights: WeightVector
    dev_wer: float
    init_wer: float
    n_evaluations: int
    restart_wers: list[float] = field(default_factory=list)


def optimize_weights(
    dev: Sequence[tuple[NBestList, Sequence]],
    init: WeightVector,
    restarts: int = 2,
    seed: int = 0,
    max_iters: int = 20,
    costs: AlignCosts = AlignCosts(),
) -> OptimizeResult:
    """Cyclic coordinate search over a 41-point grid per dimension,
    minimizing the corpus WER of each list's argmax hypothesis.

    The reference dimension's weight never moves (identifiability).
    Ties in WER break toward the smaller move from the incumbent weight,
    then toward the smaller value; restarts perturb the init. The result
    is never worse than the best init evaluated (monotone acceptance).
    """
    if not dev:
        raise DataError("empty development set")
    dims = sorted(init)
    dim_set = frozenset(dims)
    for nbest, _ in dev:
        if nbest.dimensions != dim_set:
            raise DataError(
                f"{nbest.utterance_id}: dimensions {sorted(nbest.dimensions)} "
                f"do not match weights {dims}"
            )
    frozen = reference_dimension(dims)

    # Dense score matrices once; the sweep is then pure linear algebra.
    # Hard zeros become a huge finite penalty so 0-weight trials stay NaN-free.
    mats = []
    for nbest, ref in dev:
        m = np.array(
            [[h.scores[d] for d in dims] for h in nbest.hypotheses], dtype=np.float64
        )
        m = np.where(np.isneginf(m), -1e30, m)
        mats.append((m, [h.surfaces() for h in nbest.hypotheses], [str(t) for t in ref]))

    n_evals = 0
    align_cache: dict[tuple, tuple[int, int]] = {}

    def corpus_wer(weights: dict[str, float]) -> float:
        nonlocal n_evals
        n_evals += 1
        vec = np.array([weights[d] for d in dims])
        err = total = 0
        for m, hyp_surfaces, ref_surfaces in mats:
            k = int(np.argmax(m @ vec))
            key = (id(m), k)
            if key not in align_cache:
                a = align(ref_surfaces, hyp_surfaces[k], costs=costs)
                align_cache[key] = (a.n_err, a.n_ref)
            e, r = align_cache[key]
            err += e
            total += r
        if total == 0:
            raise DataError("development references contain no words")
        return err / total

    init_weights = dict(init.weights)
    init_wer = corpus_wer(init_weights)
    best_weights, best_wer = dict(init_weights), init_wer
    rng = np.random.default_rng(seed)
    restart_wers = []

    for restart in range(max(1, restarts)):
        if restart == 0:
            current = dict(init_weights)
        else:
            current = {
                d: (init_weights[d] if d == frozen else init_weights[d] + rng.normal(0.0, 0.3))
                for d in dims
            }
        current_wer = corpus_wer(current)
        for _ in range(max_iters):
            moved = False
            for d in dims:
                if d == frozen:
                    continue
                center = current[d]
                radius = max(1.0, abs(center))
                candidates = np.linspace(center - radius, center + radius, GRID_POINTS)
                chosen, chosen_wer = center, current_wer
                for cand in sorted(candidates, key=lambda c: (abs(c - center), c)):
                    trial = dict(current)
                    trial[d] = float(cand)
                    w = corpus_wer(trial)
                    if w < chosen_wer:
                        chosen, chosen_wer = float(cand), w
                if chosen != center:
                    current[d] = chosen
                    current_wer = chosen_wer
                    moved = True
            if not moved:
                break
        restart_wers.append(current_wer)
        better = current_wer < best_wer
        same_but_closer = current_wer == best_wer and sum(
            abs(current[d] - init_weights[d]) for d in dims
        ) < sum(abs(best_weights[d] - init_weights[d]) for d in dims)
        if better or same_but_closer:
            best_weights, best_wer = dict(current), current_wer

    return OptimizeResult(
        weights=WeightVector(best_weights, posterior_scale=init.posterior_scale),
        dev_wer=best_wer,
        init_wer=init_wer,
        n_evaluations=n_evals,
        restart_wers=restart_wers,
    )
