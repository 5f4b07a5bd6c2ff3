import numpy as np
import pytest

from vdpo.config import DiffusionConfig, Dims
from vdpo.numerics import Rng
from vdpo.pipeline import build_pipeline

MINI_DIMS = Dims(
    image_size=8,
    d_v=8,
    d_t=8,
    vocab=8,
    conv_channels=2,
    tuner_hidden=8,
    token_dim=8,
    decoder_hidden=8,
    denoiser_hidden=8,
    temb_dim=8,
)


def mini_pipeline(seed=0, variant="full", steps=10):
    """Untrained pipeline with every dimension <= 8 and frozen encoders."""
    pipe = build_pipeline(MINI_DIMS, DiffusionConfig(steps=steps), seed, variant)
    pipe.encoders.freeze()
    return pipe


def mini_batch(seed=0, n=4):
    """(conditions, targets, captions, t, eps) for the miniature pipeline."""
    rng = Rng(seed, 77)
    cond = (rng.uniform((n, 64)) > 0.7).astype(float)
    tgt = rng.uniform((n, 64))
    caps = np.full((n, 6), 2)
    caps[:, 0] = 0
    caps[:, 1:4] = rng.integers(3, 8, size=(n, 3))
    caps[:, 4] = 1
    t = rng.integers(1, 11, size=n)
    eps = rng.normal((n, 64))
    return cond, tgt, caps, t, eps


@pytest.fixture
def mini():
    return mini_pipeline()


@pytest.fixture(scope="session")
def encoder_data():
    from vdpo.data import make_dataset

    return make_dataset(1600, 0, 3, "sketch2img")


@pytest.fixture(scope="session")
def pretrained(encoder_data):
    """Encoder pair after default pretraining, plus its loss history."""
    from vdpo.encoders import pretrain_encoders

    history = []
    pair = pretrain_encoders(encoder_data, seed=0, history=history)
    return pair, history


ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def ablation():
    """Default-config ablation over three seeds, shared by the ordering
    checks. Returns {"reports": {(seed, method, k): MetricsReport},
    "histories": {(seed, method): stage-2 history}, "seconds": float}."""
    import time

    from vdpo.config import VARIANTS, RunConfig
    from vdpo.metrics import evaluate_pipeline
    from vdpo.runner import eval_set, run_pretrain, train_variant, with_seed

    t0 = time.perf_counter()
    reports, histories = {}, {}
    for seed in ABLATION_SEEDS:
        cfg = with_seed(RunConfig(), seed)
        base = run_pretrain(cfg)
        samples = eval_set(cfg)
        for variant in VARIANTS:
            pipe, history = train_variant(cfg, base, variant)
            histories[seed, variant] = history
            ks = (1, 3) if variant == "full" else (1,)
            for k in ks:
                (rep,) = evaluate_pipeline(pipe, samples, [seed], cfg.task, k=k, method=variant)
                reports[seed, variant, k] = rep
    return {"reports": reports, "histories": histories, "seconds": time.perf_counter() - t0}
