"""The assembled model: frozen encoders, tuner, decoder and denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, sample
from .encoders import EncoderPair, TextEncoder, VisionEncoder
from .instructor import InstructionDecoder
from .numerics import Rng, Tensor
from .tuner import IdentityTuner, PromptTuner, aggregate_context

from .config import VARIANTS

STAGES = ("pretrain", "stage1", "stage2")


@dataclass
class Pipeline:
    encoders: EncoderPair
    tuner: object
    decoder: InstructionDecoder
    denoiser: Denoiser
    variant: str = "full"
    stage: str = "pretrain"

    @property
    def schedule(self):
        return self.denoiser.schedule

    def modules(self):
        return {
            "vision": self.encoders.vision,
            "text": self.encoders.text,
            "tuner": self.tuner,
            "instructor": self.decoder,
            "denoiser": self.denoiser,
        }

    def trainable(self):
        """Named parameters updated by stage-2 training."""
        out = {}
        for name in ("tuner", "instructor", "denoiser"):
            out.update(self.modules()[name].named_parameters(name + "."))
        return {k: v for k, v in out.items() if v.requires_grad}

    # -- the three inference steps ---------------------------------------------

    def visual_embedding(self, images):
        """Step 1: v = f_v(I). ``images`` is (N, s, s) or (N, s*s)."""
        images = np.asarray(images, dtype=np.float64)
        return self.encoders.vision(images.reshape(len(images), -1))

    def context_embedding(self, image_sets):
        """Step 1 with k-shot context: one renormalized mean per set."""
        rows = [aggregate_context(self.visual_embedding(np.stack(s))).data[0] for s in image_sets]
        return Tensor(np.stack(rows))

    def prompts(self, v):
        """Step 2: T = h(g(v)), greedy."""
        return self.decoder.generate(self.tuner(v))

    def synthesize(self, token_ids, rng):
        """Step 3: I' = D(f_t(T))."""
        c = self.encoders.text(token_ids)
        return sample(self.denoiser, c, rng)

    def infer(self, image_sets, rng):
        """Full inference for a list of k-image condition sets; returns
        (token ids (N, L), images (N, s*s))."""
        ids = self.prompts(self.context_embedding(image_sets))
        return ids, self.synthesize(ids, rng)


def build_pipeline(dims, diffusion_cfg, seed, variant="full", encoders=None, image_size=None):
    """Fresh (untrained) pipeline from config sections. ``encoders`` lets
    ablation variants share one frozen encoder pair."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = Rng(seed, 401)
    side = image_size or dims.image_size
    if encoders is None:
        encoders = EncoderPair(
            VisionEncoder(rng.child(0), side, dims.conv_channels, dims.d_v),
            TextEncoder(rng.child(1), dims.vocab, dims.d_t),
        )
    if variant == "no_prompt_tuner":
        tuner = IdentityTuner()
    else:
        tuner = PromptTuner(rng.child(2), dims.d_v, dims.tuner_hidden, dims.d_t)
    decoder = InstructionDecoder(
        rng.child(3), dims.vocab, dims.d_t, dims.token_dim, dims.decoder_hidden
    )
    schedule = NoiseSchedule(diffusion_cfg.steps, diffusion_cfg.beta_start, diffusion_cfg.beta_end)
    denoiser = Denoiser(rng.child(4), schedule, side * side, dims.d_t, dims.temb_dim, dims.denoiser_hidden)
    return Pipeline(encoders, tuner, decoder, denoiser, variant)
