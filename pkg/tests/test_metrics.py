import math
import random

import numpy as np
import pytest

from vspkit.corpus import DEFAULT_TEMPLATES, FeatureSequence, Sample, VisemeSpec, default_lexicon, generate_corpus
from vspkit.lm import ModelConfig
from vspkit.metrics import (
    EvalReport,
    align,
    bleu,
    bucketed_wer,
    corpus_wer,
    edit_distance,
    flops_estimate,
    homophene_accuracy,
    nearest_prototype_homophene_accuracy,
    parse_bucket_edges,
    percent_decrease,
    wer,
)

from oracles import recursive_distance


def test_wer_examples():
    assert wer("a b c".split(), "a b c".split()) == 0
    assert wer("the cat sat".split(), "the cat".split()) == pytest.approx(1 / 3)
    assert wer(["a"], ["b", "c"]) == 2.0
    with pytest.raises(ValueError):
        wer([], ["a"])


def test_wer_against_recursive_oracle():
    rng = random.Random(0)
    for _ in range(300):
        a = [rng.choice("abcd") for _ in range(rng.randint(1, 8))]
        b = [rng.choice("abcd") for _ in range(rng.randint(0, 8))]
        d = recursive_distance(a, b)
        assert edit_distance(a, b) == d
        assert wer(a, b) * len(a) == pytest.approx(d)
        if b:
            assert wer(b, a) * len(b) == pytest.approx(d)


def test_corpus_wer_pools_words():
    refs = [["a", "b"], ["c", "d", "e", "f"]]
    hyps = [["a"], ["c", "d", "e", "f"]]
    assert corpus_wer(refs, hyps) == pytest.approx(1 / 6)


def test_align_marks_deletions():
    assert align(["a", "b", "c"], ["a", "c"]) == [0, None, 1]
    assert align(["a", "b"], ["x", "a", "b"]) == [1, 2]


def test_bleu_identity_and_brevity():
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z"]]
    assert bleu(refs, refs) == pytest.approx(100.0)
    assert bleu([["a", "b", "c", "d"]], [["a", "b"]], max_n=2) == pytest.approx(100 * math.exp(1 - 4 / 2))
    assert bleu([["a", "b", "c", "d"]], [["a", "b"]], max_n=2) == pytest.approx(36.79, abs=0.01)


def test_bleu_disjoint():
    assert bleu([["a", "b", "c"]], [["x", "y", "z"]]) < 5
    assert bleu([["a", "b", "c"]], [["x", "y", "z"]], smooth=False) == 0.0


def test_bleu_hand_computed():
    ref = "the cat sat on the mat".split()
    hyp = "the cat on the mat".split()
    # clipped matches: 1-gram 5/5, 2-gram 3/4, 3-gram 1/3, 4-gram 0/2
    p = [5 / 5, (3 + 1) / (4 + 1), (1 + 1) / (3 + 1), (0 + 1) / (2 + 1)]
    expected = 100 * math.exp(1 - 6 / 5) * math.exp(sum(math.log(x) for x in p) / 4)
    assert bleu([ref], [hyp]) == pytest.approx(expected)


def test_bleu_order_invariant_and_count_check():
    rng = random.Random(1)
    refs = [[rng.choice("abcdef") for _ in range(rng.randint(3, 9))] for _ in range(20)]
    hyps = [[rng.choice("abcdef") for _ in range(rng.randint(2, 9))] for _ in range(20)]
    perm = list(range(20))
    rng.shuffle(perm)
    assert bleu(refs, hyps) == pytest.approx(bleu([refs[i] for i in perm], [hyps[i] for i in perm]))
    with pytest.raises(ValueError):
        bleu(refs, hyps[:-1])


def test_bleu_multiple_references_closest_length():
    refs = [(["a", "b", "c", "d", "e", "f"], ["a", "b"])]
    assert bleu(refs, [["a", "b"]], max_n=2) == pytest.approx(100.0)


def test_percent_decrease_reference_row():
    assert round(percent_decrease(27.2, 17.9), 1) == 34.2


def test_flops_monotone_superlinear():
    cfg = ModelConfig(vocab_size=300)
    values = [flops_estimate(cfg, t) for t in range(1, 200)]
    assert all(b > a for a, b in zip(values, values[1:]))
    for t in (1, 5, 40, 120):
        assert flops_estimate(cfg, 2 * t) > 2 * flops_estimate(cfg, t)
    with pytest.raises(ValueError):
        flops_estimate(cfg, 0)


def test_flops_formula():
    cfg = ModelConfig(vocab_size=10, n_layers=2, d_model=8, d_ff=16, n_heads=2)
    t = 5
    fwd = 2 * (8 * t * 64 + 4 * t * t * 8 + 4 * t * 8 * 16) + 2 * t * 8 * 10
    assert flops_estimate(cfg, t) == 3 * fwd


def _sample(i, t, words):
    return Sample(f"b{i}", FeatureSequence(np.zeros((t, 1)), 25.0), tuple(words), {})


def test_bucketed_wer_single_bucket_equals_corpus():
    samples = [_sample(i, 30 + i, ["a", "b", "c"]) for i in range(4)]
    hyps = [["a", "b", "c"], ["a"], ["a", "x", "c"], []]
    out = bucketed_wer(samples, hyps, [0, 100])
    assert list(out) == ["0-100s"]
    assert out["0-100s"][0] == pytest.approx(corpus_wer([s.transcript for s in samples], hyps))
    assert out["0-100s"][1] == 4


def test_bucketed_wer_weighted_identity():
    samples = [_sample(0, 25, ["a", "b"]), _sample(1, 75, ["a", "b", "c", "d"]), _sample(2, 160, ["q"])]
    hyps = [["a"], ["a", "b", "x", "d", "e"], ["q"]]
    out = bucketed_wer(samples, hyps, "0-2,2-4,4-6,>6")
    assert set(out) == {"0-2s", "2-4s", ">6s"}
    assert "4-6s" not in out
    words = {"0-2s": 2, "2-4s": 4, ">6s": 1}
    combined = sum(out[k][0] * words[k] for k in out) / sum(words.values())
    assert combined == pytest.approx(corpus_wer([s.transcript for s in samples], hyps))


def test_parse_bucket_edges():
    assert parse_bucket_edges("0-2,2-4,4-6,>6") == (0.0, 2.0, 4.0, 6.0, math.inf)
    assert parse_bucket_edges([0, 1.5, 3]) == (0.0, 1.5, 3.0)
    with pytest.raises(ValueError):
        parse_bucket_edges([0, 2, 1])


@pytest.fixture(scope="module")
def homophene_corpus():
    spec = VisemeSpec.default()
    lexicon = default_lexicon()
    return spec, lexicon, generate_corpus(spec, lexicon, 80, DEFAULT_TEMPLATES, seed=8)


def test_homophene_accuracy_extremes(homophene_corpus):
    _, lexicon, corpus = homophene_corpus
    swap = {}
    for a, b in lexicon.homophene_pairs:
        swap[a], swap[b] = b, a
    refs = [list(s.transcript) for s in corpus]
    wrong = [[swap.get(w, w) for w in r] for r in refs]
    assert homophene_accuracy(corpus, refs, lexicon) == 1.0
    assert homophene_accuracy(corpus, wrong, lexicon) == 0.0
    with pytest.raises(ValueError):
        homophene_accuracy([_sample(0, 3, ["the", "cat"])], [["the", "cat"]], lexicon)


def test_nearest_prototype_baseline_is_chance(homophene_corpus):
    spec, lexicon, corpus = homophene_corpus
    assert nearest_prototype_homophene_accuracy(corpus, spec, lexicon) == pytest.approx(0.5)


def test_eval_report_validation_and_serialization():
    rep = EvalReport(0.1, {"Spanish": 50.0}, {"0-2s": (0.1, 3)}, 0.9, 0.3, 1e9, 30.0)
    assert '"wer": 0.1' in rep.to_json()
    assert rep.to_csv().splitlines()[0] == "metric,value"
    with pytest.raises(ValueError):
        EvalReport(0.1, {"Spanish": 150.0}, {}, 0.9, 0.3, 1e9, 30.0)
