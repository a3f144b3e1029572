import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from sparsegan.corpus import ConfigError
from sparsegan.evalkit import bleu_n, bleu_scores, evaluate, ngram_oracle, self_bleu, sentence_bleu


def oracle_bleu(cand, refs, n_max):
    """BLEU recomputed from brute-force n-gram profiles."""
    c = cand.split()
    rs = [r.split() for r in refs]
    logs = []
    for n in range(1, min(n_max, len(c)) + 1):
        prof = ngram_oracle(cand, n)
        ref_profs = [ngram_oracle(r, n) for r in refs]
        m = sum(min(k, max(p.get(g, 0) for p in ref_profs)) for g, k in prof.items())
        t = sum(prof.values())
        logs.append(math.log(m / t if m else 1e-9))
    ref_len = sorted((abs(len(r) - len(c)), len(r)) for r in rs)[0][1]
    bp = 1.0 if len(c) >= ref_len else math.exp(1 - ref_len / len(c))
    return bp * math.exp(sum(logs) / len(logs))


def test_oracle_examples():
    assert ngram_oracle("a a a", 2) == {("a", "a"): 2}
    assert ngram_oracle("a b", 3) == {}
    with pytest.raises(ValueError):
        ngram_oracle("a", 0)


def test_hand_example():
    d = sentence_bleu("a b c", ["a b d"], 2)
    assert d.precisions == [2 / 3, 1 / 2]
    assert d.brevity_penalty == 1.0
    assert abs(bleu_n(["a b c"], ["a b d"], 2) - math.sqrt(1 / 3)) < 1e-10


def test_identical_candidate_scores_one():
    assert bleu_n(["the dog sees a cat"], ["a cat", "the dog sees a cat"], 4) == 1.0


def test_disjoint_vocabulary_hits_floor():
    assert bleu_n(["x y z"], ["a b c"], 2) <= 1e-4


def test_brevity_penalty_closest_shorter_on_tie():
    d = sentence_bleu("a b c", ["a b", "a b c d"], 1)
    assert d.ref_length == 2
    d = sentence_bleu("a b", ["a b c d"], 1)
    assert d.brevity_penalty == pytest.approx(math.exp(1 - 4 / 2))


def test_short_candidate_uses_available_orders():
    assert bleu_n(["a"], ["a"], 4) == 1.0
    assert sentence_bleu("a b", ["a c"], 4).precisions == [1 / 2, 1e-9]


def test_empty_candidates_skipped_and_counted():
    scores, skipped = bleu_scores(["", "a b", "  "], ["a b"], 2)
    assert skipped == 2 and scores == [1.0]


def test_empty_lists_rejected():
    with pytest.raises(ConfigError):
        bleu_n([], ["a"])
    with pytest.raises(ConfigError):
        bleu_n(["a"], [])


def test_oracle_cross_check_random_sentences():
    rnd = random.Random(3)
    words = "the a dog cat sees big runs near".split()
    sent = lambda: " ".join(rnd.choice(words) for _ in range(rnd.randint(1, 9)))
    refs = [sent() for _ in range(30)]
    for _ in range(200):
        c = sent()
        assert abs(bleu_n([c], refs, 4) - oracle_bleu(c, refs, 4)) < 1e-12


def test_self_bleu_duplicates_exactly_one():
    assert self_bleu(["a b c d"] * 5, 4) == 1.0


def test_self_bleu_hand_leave_one_out():
    # "a b c" and "a b d" each score sqrt(1/3) against the other two;
    # "x y" matches nothing and its closest other length is 3
    expected = (2 * math.sqrt(1 / 3) + math.exp(1 - 3 / 2) * 1e-9) / 3
    assert self_bleu(["a b c", "a b d", "x y"], 2) == pytest.approx(expected, abs=1e-15)


def test_self_bleu_disjoint():
    assert self_bleu(["a b", "c d", "e f"], 2) <= 1e-4


def test_self_bleu_matches_explicit_leave_one_out():
    rnd = random.Random(9)
    words = "p q r s t u".split()
    cands = [" ".join(rnd.choice(words) for _ in range(rnd.randint(1, 7))) for _ in range(25)]
    explicit = sum(sentence_bleu(c, cands[:i] + cands[i + 1:], 3).score for i, c in enumerate(cands)) / 25
    assert abs(self_bleu(cands, 3) - explicit) < 1e-12


def test_self_bleu_needs_two():
    with pytest.raises(ConfigError):
        self_bleu(["a b"])
    with pytest.raises(ConfigError):
        self_bleu(["a b", ""])


sentences = st.lists(st.sampled_from("a b c d e".split()), min_size=1, max_size=8).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=6), st.lists(sentences, min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_bounds_order_and_duplicates(cands, refs, rnd):
    s = bleu_n(cands, refs, 3)
    assert 0.0 <= s <= 1.0
    shuffled_c, shuffled_r = cands[:], refs[:]
    rnd.shuffle(shuffled_c)
    rnd.shuffle(shuffled_r)
    assert bleu_n(shuffled_c, shuffled_r, 3) == pytest.approx(s, abs=1e-15)
    assert bleu_n(cands, refs + [refs[0]], 3) == s


@settings(max_examples=30, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=6), st.integers(1, 5))
def test_verbatim_candidates_score_one(refs, n_max):
    assert bleu_n(refs, refs, n_max) == 1.0


def test_evaluate_shape():
    out = evaluate(["a b c", "a b"], ["a b c", "a b"])
    assert set(out) == {"bleu", "self_bleu", "n_candidates", "n_references"}
    assert out["bleu"]["2"] == 1.0 and set(out["self_bleu"]) == {"2", "3", "4", "5"}
