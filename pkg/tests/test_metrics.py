import json
import math

import numpy as np
import pytest

from vdpo import data as D
from vdpo.config import DiffusionConfig, Dims
from vdpo.metrics import (
    FeatureStats,
    MetricError,
    MetricsReport,
    backproject_prompts,
    bleu,
    cider,
    context_sets,
    corpus_bleu,
    evaluate_pipeline,
    fid,
    fid_from_features,
    lpips_proxy,
    text_scores,
)
from vdpo.numerics import Rng, ShapeError
from vdpo.pipeline import build_pipeline


def brute_cider(candidates, references_list, max_n=4):
    """Dense-vector TF-IDF oracle, written independently of the library."""
    n_docs = len(references_list)
    total = np.zeros(len(candidates))
    for n in range(1, max_n + 1):

        def grams(s):
            return [tuple(s[i : i + n]) for i in range(len(s) - n + 1)]

        vocab = sorted({g for refs in references_list for r in refs for g in grams(r)} | {g for c in candidates for g in grams(c)})
        index = {g: i for i, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for refs in references_list:
            present = np.zeros(len(vocab), dtype=bool)
            for r in refs:
                for g in grams(r):
                    present[index[g]] = True
            df += present
        idf = math.log(n_docs) - np.log(np.maximum(df, 1.0))

        def vec(s):
            v = np.zeros(len(vocab))
            gs = grams(s)
            for g in gs:
                v[index[g]] += 1.0 / len(gs)
            return v * idf

        for i, (c, refs) in enumerate(zip(candidates, references_list)):
            vc = vec(c)
            sims = []
            for r in refs:
                vr = vec(r)
                denom = np.linalg.norm(vc) * np.linalg.norm(vr)
                sims.append(0.0 if denom == 0 else float(vc @ vr) / denom)
            total[i] += np.mean(sims) / max_n
    return float(10.0 * total.mean())


CORPUS = [
    "draw large bright circle center".split(),
    "draw small dim square upper-left".split(),
    "draw small bright cross lower-right".split(),
    "draw large dim triangle center".split(),
    "draw large bright cross upper-right".split(),
]


# -- FID ------------------------------------------------------------------------------


def test_fid_identical_stats_is_zero():
    s = FeatureStats.from_features(Rng(0).normal((50, 4)))
    assert abs(fid(s, s)) < 1e-8


def test_fid_one_dimensional_closed_form():
    assert abs(fid(FeatureStats([0.0], [[1.0]]), FeatureStats([1.0], [[1.0]])) - 1.0) < 1e-8
    # (mu1 - mu2)^2 + (s1 - s2)^2
    assert abs(fid(FeatureStats([0.5], [[4.0]]), FeatureStats([-1.0], [[0.25]])) - (2.25 + 2.25)) < 1e-12


def test_fid_commuting_covariances():
    d = 3
    assert abs(fid(FeatureStats(np.zeros(d), np.eye(d)), FeatureStats(np.zeros(d), 4 * np.eye(d))) - 3.0) < 1e-6


def test_fid_general_case_matches_eigenvalue_reference():
    rng = Rng(1)
    a, b = rng.normal((4, 4)), rng.normal((4, 4))
    sa, sb = a @ a.T + np.eye(4), b @ b.T + np.eye(4)
    mu_a, mu_b = rng.normal(4), rng.normal(4)
    # Tr((Sa Sb)^1/2) from the eigenvalues of Sa Sb, which are real and positive
    tr_sqrt = np.sqrt(np.linalg.eigvals(sa @ sb).real).sum()
    expect = np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt
    assert abs(fid(FeatureStats(mu_a, sa), FeatureStats(mu_b, sb)) - expect) < 1e-9


def test_fid_input_validation():
    with pytest.raises(ShapeError):
        FeatureStats([0.0, 0.0], np.eye(3))
    with pytest.raises(MetricError):
        FeatureStats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(MetricError):
        FeatureStats([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(MetricError):
        FeatureStats.from_features(np.ones((1, 3)))
    with pytest.raises(ShapeError):
        fid(FeatureStats([0.0], [[1.0]]), FeatureStats([0.0, 0.0], np.eye(2)))


def test_fid_from_features_detects_shift():
    rng = Rng(2)
    a = rng.normal((400, 3))
    b = rng.normal((400, 3)) + 1.0
    assert fid_from_features(a, a) < 1e-8
    assert abs(fid_from_features(a, b) - 3.0) < 0.5


# -- LPIPS proxy ------------------------------------------------------------------------


def test_lpips_proxy_identity_and_symmetry():
    rng = Rng(3)
    a, b = rng.uniform((16, 16)), rng.uniform((16, 16))
    assert lpips_proxy(a, a) == 0.0
    assert lpips_proxy(a, b) == lpips_proxy(b, a) > 0.0
    assert lpips_proxy(a.reshape(-1), b.reshape(-1)) == lpips_proxy(a, b)


def test_lpips_proxy_input_checks():
    with pytest.raises(ShapeError):
        lpips_proxy(np.zeros((4, 4)), np.zeros((8, 8)))
    with pytest.raises(MetricError):
        lpips_proxy(np.full((4, 4), 2.0), np.zeros((4, 4)))


# -- BLEU -------------------------------------------------------------------------------


def test_bleu_identity():
    for sent in CORPUS:
        assert bleu(sent, [sent]) == 1.0


def test_bleu_zero_unigram_overlap():
    assert bleu("a b c".split(), ["x y z".split()]) == 0.0


def test_bleu_hand_fixture():
    # unigrams 3/4, bigrams (2+1)/(3+1), trigrams (1+1)/(2+1), 4-grams (0+1)/(1+1); equal lengths
    expect = (3 / 4 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert abs(bleu("a b c d".split(), ["a b c e".split()]) - expect) < 1e-12


def test_bleu_brevity_penalty():
    got = bleu("a b".split(), ["a b c d".split()], max_n=1)
    assert abs(got - math.exp(1 - 4 / 2)) < 1e-12


def test_bleu_clips_repeated_words():
    assert abs(bleu("a a a a".split(), ["a b c d".split()], max_n=1) - 0.25) < 1e-12


def test_corpus_bleu_single_pair_equals_sentence_bleu():
    cand, ref = "draw small dim circle center".split(), CORPUS[0]
    assert corpus_bleu([cand], [[ref]]) == bleu(cand, [ref])
    assert corpus_bleu(CORPUS, [[s] for s in CORPUS]) == 1.0


def test_bleu_errors():
    with pytest.raises(MetricError):
        bleu([], [["a"]])
    with pytest.raises(MetricError):
        bleu(["a"], [])
    with pytest.raises(MetricError):
        corpus_bleu([["a"]], [])


# -- CIDEr ------------------------------------------------------------------------------


def test_cider_identity_matches_brute_force():
    refs = [[s] for s in CORPUS]
    assert abs(cider(CORPUS, refs) - brute_cider(CORPUS, refs)) < 1e-9


def test_cider_general_corpus_matches_brute_force():
    cands = [CORPUS[1], "draw large bright circle upper-left".split(), "x".split(), CORPUS[3], CORPUS[0]]
    refs = [[CORPUS[i], CORPUS[(i + 1) % 5]] for i in range(5)]
    assert abs(cider(cands, refs) - brute_cider(cands, refs)) < 1e-9


def test_cider_disjoint_candidate_contributes_zero():
    refs = [[s] for s in CORPUS]
    assert cider([["q"]] * 5, refs) == 0.0


def test_cider_errors():
    with pytest.raises(MetricError):
        cider([], [])


# -- reports and pipeline evaluation -------------------------------------------------------


def test_report_json_round_trip():
    r = MetricsReport("full", "sketch2img", 0, 1, 0.1, 0.2, 0.3, 0.4, 10)
    assert MetricsReport.from_dict(json.loads(r.to_json())) == r
    bad = json.loads(r.to_json())
    bad["schema_version"] = 99
    with pytest.raises(MetricError):
        MetricsReport.from_dict(bad)


def test_text_scores_perfect_prompts():
    ids = [D.caption_of(s) for s in D.level_specs(3)[:20]]
    b, c = text_scores(ids, ids)
    assert b == 1.0
    assert c > 0


@pytest.fixture(scope="module")
def untrained():
    pipe = build_pipeline(Dims(), DiffusionConfig(steps=5), 0)
    pipe.encoders.freeze()
    return pipe


def test_ground_truth_evaluation_is_degenerate(untrained):
    samples = D.make_dataset(40, 0, 3, "sketch2img")
    truth = (np.array([s.caption for s in samples]), np.stack([s.target.reshape(-1) for s in samples]))
    (rep,) = evaluate_pipeline(untrained, samples, [0], "sketch2img", generated=truth)
    assert rep.fid < 1e-6
    assert rep.lpips_proxy == 0.0
    assert rep.bleu == 1.0


def test_evaluation_is_deterministic(untrained):
    samples = D.make_dataset(12, 1, 3, "sketch2img")
    a = evaluate_pipeline(untrained, samples, [0, 1], "sketch2img", k=3)
    b = evaluate_pipeline(untrained, samples, [0, 1], "sketch2img", k=3)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert [r.seed for r in a] == [0, 1] and a[0].k == 3


def test_context_sets_start_with_own_condition():
    samples = D.make_dataset(5, 0, 3, "sketch2img")
    sets = context_sets(samples, 3, "sketch2img", 0)
    assert all(len(s) == 3 for s in sets)
    assert all(np.array_equal(st[0], s.condition.reshape(-1)) for st, s in zip(sets, samples))
    assert [len(s) for s in context_sets(samples, 1, "sketch2img", 0)] == [1] * 5


def test_backproject_prompts_shapes(untrained):
    samples = D.make_dataset(6, 0, 3, "sketch2img")
    cands, refs = backproject_prompts(samples, untrained)
    assert cands.shape == (6, D.CAPTION_LEN)
    assert refs == [s.caption for s in samples]
