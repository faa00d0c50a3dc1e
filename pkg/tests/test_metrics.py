import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcvae.metrics import (
    BLEU_EPS,
    NgramStats,
    bleu,
    cider,
    distinct_fraction,
    div_n,
    mbleu4,
    novel_count,
    oracle_best1,
    unique_ngrams_by_position,
)

words = st.sampled_from(list("abcde"))
captions = st.lists(words, min_size=1, max_size=6).map(" ".join)
caption_sets = st.lists(captions, min_size=2, max_size=6)


# -- BLEU -------------------------------------------------------------------


def test_bleu_brevity_penalty_example():
    assert abs(bleu("a b c d", ["a b c d e"]) - math.exp(1 - 5 / 4)) < 1e-9


def test_bleu_identity_and_disjoint():
    assert bleu("a man rides a horse", ["a man rides a horse"]) == 1.0
    # every order falls to the epsilon floor over its n-gram count: 4, 3, 2, 1
    floor = math.exp(sum(math.log(BLEU_EPS / k) for k in (4, 3, 2, 1)) / 4)
    assert bleu("x y z w", ["a b c d"]) == pytest.approx(floor, rel=1e-9)


def test_bleu_clipped_precision_by_hand():
    # unigram: 'the' appears 3x in the candidate, at most 2x in a reference -> 2/3
    assert abs(bleu("the the the", ["the cat the"], max_n=1) - 2 / 3) < 1e-12
    # two-gram BLEU, equal lengths: p1 = 3/4, p2 = 2/3 ("a b", "b c" match, "c x" does not)
    assert abs(bleu("a b c x", ["a b c d"], max_n=2) - math.sqrt(0.75 * 2 / 3)) < 1e-12


def test_bleu_uses_closest_reference_length():
    # closest reference length is 4 (ties broken toward the shorter), so no penalty
    assert bleu("a b c d", ["a b c d e f", "a b c d"]) == 1.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu("a", [])
    with pytest.raises(ValueError):
        bleu("", ["a"])


# -- CIDEr ------------------------------------------------------------------


def test_cider_identical_unique_caption_scores_ten():
    stats = NgramStats.from_references([["a b c d"], ["e f g h"]])
    assert abs(cider("a b c d", ["a b c d"], stats) - 10.0) < 1e-9


def test_cider_disjoint_scores_zero():
    stats = NgramStats.from_references([["a b c d"], ["e f g h"]])
    assert cider("e f g h", ["a b c d"], stats) == 0.0


def test_cider_three_document_hand_values():
    # documents: {"a b"}, {"a c"}, {"d e"}; df(a) = 2, every other n-gram has df 1
    stats = NgramStats.from_references([["a b"], ["a c"], ["d e"]])
    lo, hi = math.log(3 / 2), math.log(3)
    # candidate "a c" vs reference "a b": unigram vectors (lo, hi on c) and (lo, hi on b)
    uni = lo * lo / (lo * lo + hi * hi)
    assert abs(cider("a c", ["a b"], stats) - 10 * uni / 4) < 1e-9
    # candidate "a a b": term frequency 2 on 'a'
    cv = {"a": 2 * lo, "b": hi}
    rv = {"a": lo, "b": hi}
    cos1 = (cv["a"] * rv["a"] + cv["b"] * rv["b"]) / (math.hypot(*cv.values()) * math.hypot(*rv.values()))
    # bigrams: candidate {(a,a), (a,b)} both weighted by ln 3 except (a,a) unseen -> ln 3 as well
    cos2 = (hi * hi) / (math.sqrt(2) * hi * hi)
    assert abs(cider("a a b", ["a b"], stats) - 10 * (cos1 + cos2) / 4) < 1e-9
    # two references average the per-reference cosines
    two = cider("a c", ["a b", "a c"], stats)
    assert abs(two - 10 * ((uni + 1.0) / 2 + (0 + 1.0) / 2) / 4) < 1e-9


def test_cider_requires_stats():
    with pytest.raises(ValueError):
        cider("a", ["a"], NgramStats())


def test_document_frequency_bounded_by_document_count():
    stats = NgramStats.from_references([["a a b", "a b"], ["a"]])
    assert stats.n_docs == 2 and stats.df[0][("a",)] == 2 and stats.df[0][("b",)] == 1


# -- oracle ------------------------------------------------------------------


REFS = ["a dog runs on the grass", "a puppy runs in a park"]
STATS = NgramStats.from_references([REFS, ["a cat sleeps on a couch"], ["a man eats a pizza"]])


def test_oracle_single_caption_and_exact_copy():
    assert oracle_best1(["a cat"], REFS, "C", STATS)[0] == "a cat"
    best, score, scores = oracle_best1(["a cat sleeps", REFS[1], "a man"], REFS, "C", STATS)
    assert best == REFS[1]
    assert set(scores) == {"B1", "B2", "B3", "B4", "C", "R", "M", "S"} and scores["R"] is None


def test_oracle_is_monotone_in_sample_prefix():
    samples = ["a man", "a dog runs", "a cat on the grass", "a puppy runs", "the grass", "a dog runs on a park"]
    scores = [oracle_best1(samples[:k], REFS, "C", STATS)[1] for k in range(1, len(samples) + 1)]
    assert all(b >= a for a, b in zip(scores, scores[1:]))
    b4 = [oracle_best1(samples[:k], REFS, "B4", STATS)[1] for k in range(1, len(samples) + 1)]
    assert all(b >= a for a, b in zip(b4, b4[1:]))


def test_oracle_default_stats_treat_references_as_documents():
    _, score, _ = oracle_best1([REFS[0]], REFS)
    assert score > 0


# -- diversity ---------------------------------------------------------------


def test_distinct_fraction():
    assert distinct_fraction(["a b"] * 4) == 0.25
    assert distinct_fraction(["a", "b", "c"]) == 1.0
    assert distinct_fraction(["A dog.", "a dog"]) == 0.5


def test_novel_count():
    index = frozenset({"a dog", "a cat"})
    assert novel_count([["a dog", "A cat!"]], index) == 0
    assert novel_count([["a dog", "b"], ["c"]], frozenset()) == 3
    assert novel_count([["a dog", "a bird"]], index) == 1


def test_mbleu4():
    assert mbleu4(["a man rides a horse"] * 5) == 1.0
    assert mbleu4(["a b c d", "e f g h", "i j k l"]) < 1e-6
    with pytest.raises(ValueError):
        mbleu4(["only one"])
    same = ["a man rides a horse"] * 4
    assert mbleu4(same[:3] + ["z y x w v"]) < mbleu4(same)


def test_div_n():
    assert div_n(["a b", "a c"], 1) == 0.75
    assert div_n(["a b", "a c"], 2) == 0.5
    assert div_n(["a b c"], 1) == 1.0


def _histogram_brute_force(sets, n):
    out = {}
    for caps in sets:
        for c in caps:
            t = c.split()
            for end in range(len(t)):
                if end + 1 >= n:
                    out.setdefault(end + 1, set()).add(" ".join(t[end + 1 - n : end + 1]))
    return {k: len(v) for k, v in out.items()}


def test_position_histogram_brute_force():
    caps = [["a b c d", "a b e", "x b c d e"], ["a b c", "y"]]
    for n in (1, 2, 4):
        assert unique_ngrams_by_position(caps, n) == _histogram_brute_force(caps, n)
    assert unique_ngrams_by_position(caps + caps, 2) == unique_ngrams_by_position(caps, 2)
    assert set(unique_ngrams_by_position([["a b c"]], 1).values()) == {1}


@settings(max_examples=60, deadline=None)
@given(caption_sets, st.randoms(use_true_random=False))
def test_symmetric_metrics_are_permutation_invariant(caps, rnd):
    perm = list(caps)
    rnd.shuffle(perm)
    assert distinct_fraction(perm) == distinct_fraction(caps)
    assert div_n(perm, 1) == div_n(caps, 1) and div_n(perm, 2) == div_n(caps, 2)
    assert mbleu4(perm) == pytest.approx(mbleu4(caps), abs=1e-12)
    assert unique_ngrams_by_position([perm], 2) == unique_ngrams_by_position([caps], 2)


@settings(max_examples=40, deadline=None)
@given(captions, st.lists(captions, min_size=1, max_size=3))
def test_bleu_is_bounded_and_pure(c, refs):
    a = bleu(c, refs)
    assert 0.0 <= a <= 1.0 and a == bleu(c, refs)
    for perm in itertools.permutations(refs):
        assert bleu(c, list(perm)) == pytest.approx(a, abs=1e-15)
