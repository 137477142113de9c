import math
import random

import pytest

from sausagekit.concom import (
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
from sausagekit.core import (
    ConfigError,
    ConfusionNetwork,
    DataError,
    Hypothesis,
    NBestList,
    NULL_WORD,
    ScoreVector,
    Token,
    validate_cn,
)
from sausagekit.fusion import WeightVector
from tests.fixtures import make_backchannel_fixture, make_three_system_fixture
from tests.oracles import oracle_build_cn, oracle_cn_paths


def wh(words, posterior, system_id="", rank=0):
    toks = tuple(Token(w) for w in words.split()) if words else ()
    return WeightedHypothesis(tokens=toks, posterior=posterior, system_id=system_id, rank=rank)


def make_cn(bins, utt="u1"):
    return ConfusionNetwork(utterance_id=utt, bins=tuple(bins))


def single_system(system_id, utt, words, **dims):
    hyp = Hypothesis(tokens=tuple(Token(w) for w in words.split()), scores=ScoreVector(dims))
    return SystemOutput(
        system_id=system_id,
        lists={utt: NBestList(utterance_id=utt, system_id=system_id, hypotheses=(hyp,))},
    )


class TestWeightedHypothesis:
    def test_posterior_below_zero_rejected(self):
        with pytest.raises(DataError, match="posterior"):
            wh("a", -0.1)

    def test_posterior_above_one_rejected(self):
        with pytest.raises(DataError, match="posterior"):
            wh("a", 1.1)

    def test_roundoff_above_one_tolerated(self):
        assert wh("a", 1.0 + 5e-10).posterior > 1.0


class TestBuildCn:
    def test_single_hypothesis_seeds_one_bin_per_token(self):
        cn = build_cn([wh("a b c", 1.0)], utterance_id="u1")
        assert cn.utterance_id == "u1"
        assert list(cn.bins) == [{"a": 1.0}, {"b": 1.0}, {"c": 1.0}]

    def test_two_way_substitution(self):
        cn = build_cn([wh("a b c", 0.6), wh("a x c", 0.4)])
        assert list(cn.bins) == [{"a": 1.0}, {"b": 0.6, "x": 0.4}, {"c": 1.0}]

    def test_shorter_hypothesis_adds_null_mass(self):
        cn = build_cn([wh("a b", 0.5, rank=0), wh("a", 0.5, rank=1)])
        assert list(cn.bins) == [{"a": 1.0}, {"b": 0.5, NULL_WORD: 0.5}]

    def test_insertion_backfills_null_with_aligned_mass(self):
        cn = build_cn([wh("a", 0.6), wh("a b", 0.4)])
        assert list(cn.bins) == [{"a": 1.0}, {"b": 0.4, NULL_WORD: 0.6}]

    def test_empty_hypothesis_deletes_every_bin(self):
        cn = build_cn([wh("a", 0.5, rank=0), wh("", 0.5, rank=1)])
        assert list(cn.bins) == [{"a": 0.5, NULL_WORD: 0.5}]

    def test_empty_seed_then_insertions(self):
        cn = build_cn([wh("", 0.6, rank=0), wh("a b", 0.4, rank=1)])
        assert list(cn.bins) == [
            {"a": 0.4, NULL_WORD: 0.6},
            {"b": 0.4, NULL_WORD: 0.6},
        ]

    def test_input_order_does_not_matter(self):
        hyps = [wh("a b c", 0.5), wh("a x c", 0.3), wh("b c", 0.2)]
        ref = build_cn(hyps).bins
        for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
            assert build_cn([hyps[i] for i in perm]).bins == ref

    def test_posterior_ties_broken_by_system_then_rank(self):
        # s2's hypothesis would seed a different skeleton if it went first
        a = wh("x y", 0.5, system_id="s2", rank=0)
        b = wh("a b c", 0.5, system_id="s1", rank=0)
        cn = build_cn([a, b])
        assert len(cn.bins) == 3

    def test_overfull_mass_rejected(self):
        with pytest.raises(DataError, match="sum"):
            build_cn([wh("a", 0.7), wh("b", 0.5)])

    def test_no_hypotheses_rejected(self):
        with pytest.raises(DataError):
            build_cn([])

    def test_bins_are_stochastic(self):
        hyps = [wh("a b c d", 0.4), wh("a c", 0.35), wh("x b q c d", 0.25)]
        diag = validate_cn(build_cn(hyps))
        assert diag.ok

    def test_nonnull_mass_equals_posterior_weighted_length(self):
        # with posteriors summing to 1, every word lands in exactly one
        # bin, so summed non-null shares equal the expected word count
        rng = random.Random(7)
        words = ["a", "b", "c"]
        for _ in range(50):
            k = rng.randint(1, 4)
            raw = [rng.random() + 0.05 for _ in range(k)]
            total = sum(raw)
            hyps = [
                wh(" ".join(rng.choice(words) for _ in range(rng.randint(0, 4))), p / total, rank=i)
                for i, p in enumerate(raw)
            ]
            cn = build_cn(hyps)
            nonnull = sum(1.0 - b.get(NULL_WORD, 0.0) for b in cn.bins)
            expect = sum(h.posterior * len(h.tokens) for h in hyps)
            assert nonnull == pytest.approx(expect, abs=1e-9)

    def test_matches_exhaustive_alignment_oracle(self):
        rng = random.Random(20260816)
        words = ["a", "b", "c"]
        for _ in range(250):
            k = rng.randint(1, 3)
            raw = [rng.random() + 0.01 for _ in range(k)]
            scale = sum(raw) / rng.uniform(0.5, 1.0)
            hyps = [
                wh(
                    " ".join(rng.choice(words) for _ in range(rng.randint(0, 4))),
                    p / scale,
                    system_id=rng.choice(["s1", "s2"]),
                    rank=i,
                )
                for i, p in enumerate(raw)
            ]
            got = [dict(b) for b in build_cn(hyps).bins]
            want = oracle_build_cn(hyps)
            assert got == want


class TestConsensus:
    def test_majority_null_emits_nothing(self):
        assert consensus(make_cn([{"a": 0.4, NULL_WORD: 0.6}])) == ()

    def test_null_loses_exact_ties(self):
        toks = consensus(make_cn([{"a": 0.5, NULL_WORD: 0.5}]))
        assert [t.surface for t in toks] == ["a"]

    def test_word_ties_go_lexicographically(self):
        toks = consensus(make_cn([{"b": 0.5, "x": 0.5}]))
        assert [t.surface for t in toks] == ["b"]

    def test_per_bin_argmax(self):
        cn = make_cn([{"a": 0.9, "b": 0.1}, {NULL_WORD: 0.7, "c": 0.3}])
        assert [t.surface for t in consensus(cn)] == ["a"]

    def test_single_hypothesis_network_reads_back_exactly(self):
        hyp = wh("the cat sat", 1.0)
        toks = consensus(build_cn([hyp]))
        assert tuple(t.surface for t in toks) == tuple(t.surface for t in hyp.tokens)

    def test_tokens_carry_lexical_flags(self):
        toks = consensus(make_cn([{"uh-huh": 1.0}, {"uh": 1.0}]))
        assert toks[0].is_backchannel
        assert toks[1].is_filled_pause


class TestCombineSystems:
    def test_equal_mass_share_per_system(self):
        s1 = single_system("s1", "u1", "a b c", am=-1.0)
        s2 = single_system("s2", "u1", "a x c", am=-1.0)
        cn = combine_systems([s1, s2], "u1", WeightVector({"am": 1.0}))
        assert list(cn.bins) == [{"a": 1.0}, {"b": 0.5, "x": 0.5}, {"c": 1.0}]
        assert [t.surface for t in consensus(cn)] == ["a", "b", "c"]

    def test_system_order_invariance(self):
        s1 = single_system("s1", "u1", "a b c", am=-1.0)
        s2 = single_system("s2", "u1", "a x c", am=-2.0)
        w = WeightVector({"am": 1.0})
        assert combine_systems([s1, s2], "u1", w).bins == combine_systems([s2, s1], "u1", w).bins

    def test_combining_identical_systems_keeps_consensus(self):
        s1 = single_system("s1", "u1", "a b c", am=-1.0)
        s2 = single_system("s2", "u1", "a b c", am=-1.0)
        cn = combine_systems([s1, s2], "u1", WeightVector({"am": 1.0}))
        assert [t.surface for t in consensus(cn)] == ["a", "b", "c"]

    def test_per_system_weight_map(self):
        s1 = single_system("s1", "u1", "a", am=-1.0)
        s2 = single_system("s2", "u1", "a", am=-1.0)
        w = {"s1": WeightVector({"am": 1.0}), "s2": WeightVector({"am": 2.0})}
        cn = combine_systems([s1, s2], "u1", w)
        assert list(cn.bins) == [{"a": 1.0}]

    def test_weight_map_missing_system_rejected(self):
        s1 = single_system("s1", "u1", "a", am=-1.0)
        with pytest.raises(ConfigError, match="s1"):
            combine_systems([s1], "u1", {"other": WeightVector({"am": 1.0})})

    def test_missing_utterance_rejected(self):
        s1 = single_system("s1", "u1", "a", am=-1.0)
        with pytest.raises(DataError, match="u9"):
            combine_systems([s1], "u9", WeightVector({"am": 1.0}))

    def test_no_systems_rejected(self):
        with pytest.raises(DataError):
            combine_systems([], "u1", WeightVector({"am": 1.0}))


class TestCnToNbest:
    def test_exact_two_path_scores(self):
        cn = make_cn([{"a": 0.9, "b": 0.1}, {"c": 1.0}], utt="u7")
        nb = cn_to_nbest(cn, 2)
        assert nb.utterance_id == "u7"
        assert nb.system_id == "cn"
        assert [h.surfaces() for h in nb.hypotheses] == [("a", "c"), ("b", "c")]
        assert nb.hypotheses[0].scores["cn_posterior"] == math.log(0.9) + math.log(1.0)
        assert nb.hypotheses[1].scores["cn_posterior"] == math.log(0.1) + math.log(1.0)

    def test_n_larger_than_path_count_returns_all(self):
        cn = make_cn([{"a": 0.9, "b": 0.1}, {"c": 1.0}])
        assert len(cn_to_nbest(cn, 50).hypotheses) == 2

    def test_null_variants_collapse_to_best_scoring_string(self):
        cn = make_cn([{"a": 0.6, NULL_WORD: 0.4}, {"a": 0.5, NULL_WORD: 0.5}])
        nb = cn_to_nbest(cn, 10)
        strings = [h.surfaces() for h in nb.hypotheses]
        assert strings == [("a",), ("a", "a"), ()]
        # "a" is reachable two ways; the better one ties the "a a" path
        assert nb.hypotheses[0].scores["cn_posterior"] == math.log(0.6) + math.log(0.5)
        assert nb.hypotheses[1].scores["cn_posterior"] == math.log(0.6) + math.log(0.5)
        assert nb.hypotheses[2].scores["cn_posterior"] == math.log(0.4) + math.log(0.5)

    def test_zero_posterior_word_scores_neg_inf(self):
        cn = make_cn([{"a": 1.0, "b": 0.0}])
        nb = cn_to_nbest(cn, 2)
        assert [h.surfaces() for h in nb.hypotheses] == [("a",), ("b",)]
        assert nb.hypotheses[1].scores["cn_posterior"] == float("-inf")

    def test_all_null_network_yields_empty_hypothesis(self):
        nb = cn_to_nbest(make_cn([{NULL_WORD: 1.0}]), 3)
        assert len(nb.hypotheses) == 1
        assert nb.hypotheses[0].surfaces() == ()
        assert nb.hypotheses[0].scores["cn_posterior"] == 0.0

    def test_n_below_one_rejected(self):
        with pytest.raises(ConfigError, match="n"):
            cn_to_nbest(make_cn([{"a": 1.0}]), 0)

    def test_matches_exhaustive_path_oracle(self):
        rng = random.Random(99)
        words = ["a", "b", "c", NULL_WORD]
        for _ in range(120):
            bins = []
            for _ in range(rng.randint(1, 4)):
                chosen = rng.sample(words, rng.randint(1, 3))
                raw = [rng.random() + 0.05 for _ in chosen]
                total = sum(raw)
                bins.append({w: p / total for w, p in zip(chosen, raw)})
            cn = make_cn(bins)
            nb = cn_to_nbest(cn, 10_000)
            got = [(h.surfaces(), h.scores["cn_posterior"]) for h in nb.hypotheses]
            assert got == oracle_cn_paths(bins)


class TestBackchannelScore:
    def test_counts_default_lexicon(self):
        hyps = (
            Hypothesis(tokens=(Token("uh-huh"), Token("yes"), Token("uh-huh")), scores=ScoreVector({"am": -1.0})),
            Hypothesis(tokens=(Token("yes"),), scores=ScoreVector({"am": -2.0})),
        )
        nb = NBestList(utterance_id="u1", system_id="s1", hypotheses=hyps)
        out = add_backchannel_score(nb)
        assert out.hypotheses[0].scores["backchannel_count"] == 2.0
        assert out.hypotheses[1].scores["backchannel_count"] == 0.0
        assert out.hypotheses[0].scores["am"] == -1.0
        assert out.utterance_id == "u1" and out.system_id == "s1"

    def test_custom_lexicon(self):
        hyps = (Hypothesis(tokens=(Token("yeah"), Token("no")), scores=ScoreVector()),)
        nb = NBestList(utterance_id="u1", system_id="s1", hypotheses=hyps)
        out = add_backchannel_score(nb, lexicon={"yeah"})
        assert out.hypotheses[0].scores["backchannel_count"] == 1.0

    def test_original_list_is_untouched(self):
        hyps = (Hypothesis(tokens=(Token("uh-huh"),), scores=ScoreVector({"am": 0.0})),)
        nb = NBestList(utterance_id="u1", system_id="s1", hypotheses=hyps)
        add_backchannel_score(nb)
        assert "backchannel_count" not in nb.hypotheses[0].scores.dimensions


class TestWeightedFromNbest:
    def test_posteriors_and_bookkeeping(self):
        hyps = (
            Hypothesis(tokens=(Token("a"),), scores=ScoreVector({"am": -3.0})),
            Hypothesis(tokens=(Token("b"),), scores=ScoreVector({"am": -3.0})),
        )
        nb = NBestList(utterance_id="u1", system_id="sysA", hypotheses=hyps)
        out = weighted_from_nbest(nb, WeightVector({"am": 1.0}), system_weight=0.5)
        assert [h.posterior for h in out] == [0.25, 0.25]
        assert [h.rank for h in out] == [0, 1]
        assert {h.system_id for h in out} == {"sysA"}


class TestSelectSystems:
    def test_planted_subset_is_chosen(self):
        candidates, refs, expected, w = make_three_system_fixture()
        report = select_systems(candidates, refs, w)
        assert set(report.chosen) == expected
        assert report.chosen_wer == 0.0
        assert len(report.subset_wers) == 7

    def test_subset_wer_values(self):
        candidates, refs, _, w = make_three_system_fixture()
        sw = select_systems(candidates, refs, w).subset_wers
        assert sw[("sys1",)] == pytest.approx(5 / 60)
        assert sw[("sys2",)] == pytest.approx(5 / 60)
        assert sw[("sys3",)] == pytest.approx(20 / 60)
        assert sw[("sys1", "sys2")] == 0.0
        assert sw[("sys1", "sys3")] == pytest.approx(20 / 60)
        assert sw[("sys2", "sys3")] == pytest.approx(20 / 60)
        assert sw[("sys1", "sys2", "sys3")] == 0.0

    def test_chosen_beats_every_singleton(self):
        candidates, refs, _, w = make_three_system_fixture()
        report = select_systems(candidates, refs, w)
        singles = [report.subset_wers[(c.system_id,)] for c in candidates]
        assert report.chosen_wer <= min(singles)

    def test_wer_ties_prefer_fewer_systems(self):
        candidates, refs, _, w = make_three_system_fixture()
        report = select_systems(candidates, refs, w)
        assert report.subset_wers[("sys1", "sys2", "sys3")] == report.chosen_wer
        assert report.chosen == ("sys1", "sys2")

    def test_report_serializes(self):
        candidates, refs, _, w = make_three_system_fixture(n_utts=2)
        doc = select_systems(candidates, refs, w).to_json()
        assert '"chosen"' in doc and '"subsets"' in doc

    def test_too_many_candidates_rejected(self):
        systems = [single_system(f"s{k:02d}", "u1", "a", am=0.0) for k in range(17)]
        with pytest.raises(ConfigError, match="16"):
            select_systems(systems, {"u1": ["a"]}, WeightVector({"am": 1.0}))

    def test_duplicate_ids_rejected(self):
        systems = [single_system("s1", "u1", "a", am=0.0), single_system("s1", "u1", "b", am=0.0)]
        with pytest.raises(DataError, match="duplicate"):
            select_systems(systems, {"u1": ["a"]}, WeightVector({"am": 1.0}))

    def test_empty_references_rejected(self):
        with pytest.raises(DataError):
            select_systems([single_system("s1", "u1", "a", am=0.0)], {}, WeightVector({"am": 1.0}))


class TestBackchannelFixtureShape:
    # the tuned-weight behavior itself is exercised in the acceptance suite
    def test_counts_present_and_flippable(self):
        dev = make_backchannel_fixture()
        assert len(dev) == 9
        for nbest, ref in dev:
            assert nbest.dimensions == frozenset({"cn_posterior", "backchannel_count"})
            assert len(nbest.hypotheses) == 2
        flip = dev[0][0]
        assert flip.hypotheses[0].scores["backchannel_count"] == 1.0
        assert flip.hypotheses[0].surfaces()[0] == "uh-huh"
