"""Metric oracles: BLEU hand cases, entity F1 vs brute force, aggregation."""

import math
import random

import pytest

from fewshot_dlg.errors import EmptyInput
from fewshot_dlg.metrics import EvalPair, aggregate_runs, corpus_bleu, entity_f1


def _pair(ref, hyp, entities=()):
    return EvalPair(tuple(ref.split()), tuple(hyp.split()), frozenset(entities))


class TestCorpusBleu:
    def test_identity_is_100(self):
        pairs = [
            _pair("a b c d e", "a b c d e"),
            _pair("the quick brown fox jumps", "the quick brown fox jumps"),
        ]
        assert corpus_bleu(pairs) == 100.0

    def test_zero_overlap_is_0(self):
        assert corpus_bleu([_pair("a b c d", "x y z w")]) == 0.0

    def test_brevity_penalty_case(self):
        # all modified precisions are 1; hyp shorter than ref by one token
        score = corpus_bleu([_pair("a b c d e", "a b c d")])
        assert score == pytest.approx(100.0 * math.exp(1 - 5 / 4), abs=1e-3)
        assert score == pytest.approx(77.8801, abs=1e-3)

    def test_no_smoothing_zero_fourgram(self):
        # trigram-long hypothesis has no 4-grams at all
        assert corpus_bleu([_pair("a b c", "a b c")]) == 0.0

    def test_permutation_invariant(self):
        rng = random.Random(0)
        words = "a b c d e f g".split()
        pairs = []
        for _ in range(12):
            ref = [rng.choice(words) for _ in range(rng.randint(4, 9))]
            hyp = [rng.choice(words) for _ in range(rng.randint(4, 9))]
            pairs.append(EvalPair(tuple(ref), tuple(hyp)))
        base = corpus_bleu(pairs)
        for _ in range(5):
            rng.shuffle(pairs)
            assert corpus_bleu(pairs) == pytest.approx(base, abs=1e-12)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            corpus_bleu([])

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            EvalPair((), ("a",))


def _all_contiguous(tokens):
    toks = list(tokens)
    return {
        " ".join(toks[i:j])
        for i in range(len(toks))
        for j in range(i + 1, len(toks) + 1)
    }


def brute_force_entity_f1(pairs):
    """Independent oracle: enumerate every contiguous subsequence."""
    hits = pred_total = gold_total = 0
    for p in pairs:
        gold = p.kb_entities & _all_contiguous(p.reference)
        pred = p.kb_entities & _all_contiguous(p.hypothesis)
        hits += len(gold & pred)
        pred_total += len(pred)
        gold_total += len(gold)
    prec = hits / pred_total if pred_total else 0.0
    rec = hits / gold_total if gold_total else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return 100 * prec, 100 * rec, 100 * f1


class TestEntityF1:
    def test_verbatim_mention(self):
        p, r, f1 = entity_f1([_pair("the stop is at main plaza", "go to main plaza now",
                                    {"main plaza"})])
        assert (p, r, f1) == (100.0, 100.0, 100.0)

    def test_half_overlap(self):
        # gold {a, b}; predicted {a, c}
        pairs = [_pair("a b", "a c", {"a", "b", "c"})]
        p, r, f1 = entity_f1(pairs)
        assert (p, r, f1) == (50.0, 50.0, 50.0)

    def test_empty_prediction(self):
        p, r, f1 = entity_f1([_pair("a", "x y", {"a"})])
        assert f1 == 0.0
        assert p == 0.0

    def test_multi_token_needs_contiguity(self):
        pairs = [_pair("el camino real is here", "real camino el", {"el camino real"})]
        p, r, f1 = entity_f1(pairs)
        assert r == 0.0

    def test_empty_gold_feeds_precision_only(self):
        pairs = [
            _pair("no entities here", "a", {"a"}),       # gold empty, pred {a}
            _pair("a is the answer", "a", {"a"}),        # both {a}
        ]
        p, r, f1 = entity_f1(pairs)
        assert p == 50.0
        assert r == 100.0

    def test_matches_brute_force(self):
        rng = random.Random(7)
        words = "a b c d e".split()
        for _ in range(300):
            entities = set()
            for _ in range(rng.randint(0, 3)):
                entities.add(" ".join(rng.choice(words) for _ in range(rng.randint(1, 2))))
            pairs = []
            for _ in range(rng.randint(1, 4)):
                ref = tuple(rng.choice(words) for _ in range(rng.randint(1, 6)))
                hyp = tuple(rng.choice(words) for _ in range(rng.randint(0, 6)))
                pairs.append(EvalPair(ref, hyp, frozenset(entities)))
            assert entity_f1(pairs) == brute_force_entity_f1(pairs)

    def test_bounds_and_f1_le_max(self):
        rng = random.Random(11)
        words = "a b c".split()
        for _ in range(200):
            pairs = [
                EvalPair(
                    tuple(rng.choice(words) for _ in range(rng.randint(1, 5))),
                    tuple(rng.choice(words) for _ in range(rng.randint(0, 5))),
                    frozenset(rng.sample(words, rng.randint(0, 3))),
                )
                for _ in range(rng.randint(1, 3))
            ]
            p, r, f1 = entity_f1(pairs)
            assert 0.0 <= p <= 100.0 and 0.0 <= r <= 100.0 and 0.0 <= f1 <= 100.0
            assert f1 <= max(p, r) + 1e-9

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            entity_f1([])


class TestAggregateRuns:
    def test_single_value(self):
        assert aggregate_runs([7.0]) == (7.0, 0.0)

    def test_two_values(self):
        mean, std = aggregate_runs([8.0, 10.0])
        assert mean == 9.0
        assert std == pytest.approx(1.4142, abs=1e-4)

    def test_constant(self):
        assert aggregate_runs([5, 5, 5]) == (5.0, 0.0)

    def test_translation_properties(self):
        rng = random.Random(3)
        values = [rng.uniform(0, 100) for _ in range(10)]
        mean, std = aggregate_runs(values)
        mean2, std2 = aggregate_runs([v + 11.5 for v in values])
        assert mean2 == pytest.approx(mean + 11.5, abs=1e-9)
        assert std2 == pytest.approx(std, abs=1e-9)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            aggregate_runs([])
