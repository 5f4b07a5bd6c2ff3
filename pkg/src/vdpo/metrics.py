"""Evaluation metrics: FID, an LPIPS-style proxy, BLEU and CIDEr.

FID here is computed on the frozen in-repo vision encoder's 32-d features,
not Inception features, so values are not comparable to published FIDs.
The LPIPS proxy uses fixed random convolution filters, not learned
weights.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .numerics import Rng, ShapeError

SCHEMA_VERSION = 1
COV_EPS = 1e-6
FID_NOTE = "FID on frozen in-repo f_v features (d=32), not Inception; LPIPS column is a fixed-random-filter proxy"


class MetricError(ValueError):
    pass


# -- FID -----------------------------------------------------------------------------


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ShapeError(f"covariance shape {self.sigma.shape} does not match mean ({d},)")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-12):
            raise MetricError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.sigma).min() < -1e-10:
            raise MetricError("covariance must be positive semi-definite")

    @classmethod
    def from_features(cls, feats, eps=COV_EPS):
        """Mean and unbiased covariance of rows, plus ``eps * I``."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricError("need at least 2 feature rows")
        mu = feats.mean(axis=0)
        centered = feats - mu
        sigma = centered.T @ centered / (feats.shape[0] - 1)
        sigma = 0.5 * (sigma + sigma.T) + eps * np.eye(feats.shape[1])
        return cls(mu, sigma)


def _psd_sqrt(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mu.shape != b.mu.shape:
        raise ShapeError("feature dimensions differ")
    try:
        root_a = _psd_sqrt(a.sigma)
        inner = root_a @ b.sigma @ root_a
        eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"eigendecomposition failed: {exc}") from None
    diff = a.mu - b.mu
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sqrt(np.clip(eig, 0.0, None)).sum()
    return float(max(value, 0.0))


def fid_from_features(feats_a, feats_b):
    return fid(FeatureStats.from_features(feats_a), FeatureStats.from_features(feats_b))


# -- LPIPS-style proxy ---------------------------------------------------------------

LPIPS_SEED = 1729
LPIPS_CHANNELS = 8
LPIPS_SCALES = 3


def _lpips_filters():
    w = Rng(LPIPS_SEED).normal((LPIPS_SCALES, LPIPS_CHANNELS, 3, 3))
    return w / np.sqrt((w**2).sum(axis=(2, 3), keepdims=True))


_FILTERS = _lpips_filters()


def _conv_features(img, filters):
    p = np.pad(img, 1)
    h, w = img.shape
    out = np.zeros((filters.shape[0], h, w))
    for dy in range(3):
        for dx in range(3):
            out += filters[:, dy, dx, None, None] * p[None, dy : dy + h, dx : dx + w]
    return np.tanh(out)


def _pool2(img):
    h, w = img.shape
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def lpips_proxy(a, b):
    """Mean over 3 scales of the mean squared difference of fixed random
    3x3 conv features (tanh). Labelled a proxy wherever reported."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        side = int(round(math.sqrt(a.size)))
        a, b = a.reshape(side, side), b.reshape(side, side)
    for img in (a, b):
        if img.min() < 0 or img.max() > 1:
            raise MetricError("lpips_proxy expects values in [0, 1]")
    total = 0.0
    for s in range(LPIPS_SCALES):
        fa = _conv_features(a, _FILTERS[s])
        fb = _conv_features(b, _FILTERS[s])
        total += float(((fa - fb) ** 2).mean())
        if s + 1 < LPIPS_SCALES:
            a, b = _pool2(a), _pool2(b)
    return total / LPIPS_SCALES


# -- BLEU ------------------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(candidate, references, max_n):
    cand = list(candidate)
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c = _ngrams(cand, n)
        max_ref = Counter()
        for ref in references:
            for g, k in _ngrams(list(ref), n).items():
                max_ref[g] = max(max_ref[g], k)
        matches.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    ref_lens = [len(r) for r in references]
    closest = min(ref_lens, key=lambda r: (abs(r - len(cand)), r))
    return matches, totals, len(cand), closest


def _combine(matches, totals, cand_len, ref_len, max_n):
    logs = []
    for n in range(max_n):
        if n == 0:
            if matches[0] == 0:
                return 0.0
            logs.append(math.log(matches[0] / totals[0]))
        else:
            # add-one smoothing for n >= 2
            logs.append(math.log((matches[n] + 1) / (totals[n] + 1)))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(sum(logs) / max_n)


def bleu(candidate, references, max_n=4):
    """Sentence BLEU over word lists: clipped n-gram precisions, add-one
    smoothing for n >= 2, brevity penalty against the closest reference
    length."""
    if len(candidate) == 0:
        raise MetricError("empty candidate")
    if not references:
        raise MetricError("need at least one reference")
    return _combine(*_bleu_stats(candidate, references, max_n), max_n)


def corpus_bleu(candidates, references_list, max_n=4):
    """Corpus BLEU: n-gram counts and lengths summed before combining."""
    if len(candidates) != len(references_list) or not candidates:
        raise MetricError("need equal, non-zero numbers of candidates and reference sets")
    matches, totals = [0] * max_n, [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references_list):
        if len(cand) == 0:
            raise MetricError("empty candidate")
        m, t, c, r = _bleu_stats(cand, refs, max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        cand_len += c
        ref_len += r
    return _combine(matches, totals, cand_len, ref_len, max_n)


# -- CIDEr -----------------------------------------------------------------------------


def _tfidf(tokens, n, df, log_n):
    counts = _ngrams(list(tokens), n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (k / total) * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, k in counts.items()}


def _cosine(a, b):
    na = math.sqrt(sum(x * x for x in a.values()))
    nb = math.sqrt(sum(x * x for x in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * b.get(g, 0.0) for g, x in a.items()) / (na * nb)


def cider(candidates, references_list, max_n=4):
    """Corpus CIDEr: for each n, TF-IDF n-gram vectors with document
    frequencies over the reference sets; score per candidate is 10 x the
    mean over n of its average cosine to its references. Returns the mean
    over candidates."""
    if not references_list or len(candidates) != len(references_list):
        raise MetricError("need equal, non-zero numbers of candidates and reference sets")
    log_n = math.log(float(len(references_list)))
    scores = np.zeros(len(candidates))
    for n in range(1, max_n + 1):
        df = Counter()
        for refs in references_list:
            seen = set()
            for ref in refs:
                seen.update(_ngrams(list(ref), n))
            df.update(seen)
        for i, (cand, refs) in enumerate(zip(candidates, references_list)):
            vc = _tfidf(cand, n, df, log_n)
            sims = [_cosine(vc, _tfidf(ref, n, df, log_n)) for ref in refs]
            scores[i] += np.mean(sims) / max_n
    return float(10.0 * scores.mean())


# -- pipeline evaluation -----------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    task: str
    seed: int
    k: int
    fid: float
    lpips_proxy: float
    bleu: float
    cider: float
    n_samples: int
    schema_version: int = SCHEMA_VERSION
    note: str = FID_NOTE
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, obj):
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise MetricError(f"unsupported report schema version {obj.get('schema_version')!r}")
        return cls(**obj)


def text_scores(candidate_ids, reference_ids):
    cands = [D.strip_special(c) for c in candidate_ids]
    refs = [[D.strip_special(r)] for r in reference_ids]
    # an all-special candidate counts as a single unknown word
    cands = [c if c else ["<empty>"] for c in cands]
    return corpus_bleu(cands, refs), cider(cands, refs)


def image_scores(generated, targets, vision):
    generated = np.asarray(generated, dtype=np.float64).reshape(len(generated), -1)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    fg = vision(generated).data
    fr = vision(targets).data
    lp = float(np.mean([lpips_proxy(a, b) for a, b in zip(generated, targets)]))
    return fid_from_features(fg, fr), lp


def context_sets(samples, k, task, seed):
    """Condition sets for k-shot evaluation: each sample's own condition
    plus k-1 fresh renderings of the same scene."""
    rng = Rng(seed, 501)
    sets = []
    for s in samples:
        extra = D.context_conditions(s.spec, k - 1, task, rng) if k > 1 else []
        sets.append([s.condition.reshape(-1)] + [c.reshape(-1) for c in extra])
    return sets


def evaluate_pipeline(pipe, samples, seeds, task, k=1, method=None, generated=None):
    """One MetricsReport per seed. ``generated`` (optional) replaces the
    synthesized images and prompts with given (ids, images); used for
    degenerate ground-truth-vs-itself checks."""
    reports = []
    targets = np.stack([s.target.reshape(-1) for s in samples])
    refs = [s.caption for s in samples]
    for seed in seeds:
        if generated is None:
            ids, images = pipe.infer(context_sets(samples, k, task, seed), Rng(seed, 502))
        else:
            ids, images = generated
        f, lp = image_scores(images, targets, pipe.encoders.vision)
        b, c = text_scores(ids, refs)
        reports.append(
            MetricsReport(method or pipe.variant, task, int(seed), int(k), f, lp, b, c, len(samples))
        )
    return reports


def backproject_prompts(samples, pipe):
    """(candidate ids, reference ids): greedy prompts from each sample's
    condition vs its ground-truth caption."""
    v = pipe.visual_embedding(np.stack([s.condition for s in samples]))
    return pipe.prompts(v), [s.caption for s in samples]
