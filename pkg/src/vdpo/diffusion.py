"""Conditional DDPM over flattened grayscale images."""

from __future__ import annotations

import math

import numpy as np

from .layers import Module, dense_init
from .numerics import (
    Adam,
    NonFiniteError,
    Tensor,
    as_tensor,
    clip,
    concat,
    mse,
    relu,
    softplus,
)

CLAMP_SHARPNESS = 30.0


class NoiseSchedule:
    """Linear beta schedule. Arrays are indexed by timestep 0..S with the
    convention beta_0 = 0 and alpha_bar_0 = 1."""

    def __init__(self, steps=100, beta_start=1e-4, beta_end=0.02):
        if steps < 2:
            raise ValueError("need at least 2 diffusion steps")
        if not 0 < beta_start < beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps)])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not self.check_invariants():
            # long schedules with large betas underflow alpha_bar to 0
            raise ValueError(f"alpha_bar underflows for steps={steps}, beta_end={beta_end}")

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"timestep out of range 1..{self.steps}")
        return t

    def check_invariants(self):
        b = self.betas[1:]
        ab = self.alpha_bars
        return bool(
            np.all((b > 0) & (b < 1))
            and np.all(np.diff(b) > 0)
            and ab[0] == 1.0
            and np.all(np.diff(ab) < 0)
            and np.all((ab > 0) & (ab <= 1))
        )


def timestep_embedding(t, dim=16):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(Module):
    """MLP noise predictor over [x_t, temb(t), c] -> hidden (relu) -> 256.

    The MLP output ``F`` is read as a clean-image guess and turned into the
    noise prediction in closed form, eps_hat = (x_t - sqrt(abar) F) /
    sqrt(1 - abar). A one-hidden-layer MLP cannot learn the large
    timestep-dependent gain that eps needs near t = 1; this way it never
    has to. The unit-norm condition is scaled by sqrt(cond_dim) so its
    entries are on the same scale as the pixels.
    """

    def __init__(self, rng, schedule, image_dim=256, cond_dim=32, temb_dim=16, hidden=256):
        super().__init__()
        self.schedule = schedule
        self.image_dim = image_dim
        self.cond_dim = cond_dim
        self.temb_dim = temb_dim
        self.cond_scale = math.sqrt(cond_dim)
        self.add_param("w1", dense_init(rng, image_dim + temb_dim + cond_dim, hidden, gain=math.sqrt(2.0)))
        self.add_param("b1", np.zeros(hidden))
        self.add_param("w2", dense_init(rng, hidden, image_dim, gain=0.5))
        self.add_param("b2", np.zeros(image_dim))

    def __call__(self, x_t, t, c):
        t = self.schedule.check_t(t)
        x_t = as_tensor(x_t)
        temb = Tensor(timestep_embedding(t, self.temb_dim))
        h = concat([x_t, temb, as_tensor(c) * self.cond_scale], axis=1)
        p = self.params
        guess = relu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        ab = self.schedule.alpha_bars[t].reshape(-1, 1)
        return (x_t - guess * np.sqrt(ab)) * (1.0 / np.sqrt(1.0 - ab))


def forward_noise(schedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per row of x0."""
    t = schedule.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("noise must match the image shape")
    ab = schedule.alpha_bars[t]
    if x0.ndim > 1:
        ab = np.reshape(ab, (-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def smooth_clamp(x, sharpness=CLAMP_SHARPNESS):
    """Differentiable clamp to [0, 1]: (softplus(kx) - softplus(k(x-1))) / k.
    Within ~0.02 of a hard clamp for k = 30. The final hard clip only
    removes round-off overshoot."""
    x = as_tensor(x)
    soft = (softplus(x * sharpness) - softplus((x - 1.0) * sharpness)) * (1.0 / sharpness)
    return clip(soft, 0.0, 1.0)


def x0_from_eps(schedule, x_t, t, eps_hat, clamp=True):
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t].reshape(-1, 1)
    raw = (as_tensor(x_t) - as_tensor(eps_hat) * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
    return smooth_clamp(raw) if clamp else raw


def x0_estimate(denoiser, x_t, t, c, clamp=True):
    """One-step clean-image estimate from the predicted noise."""
    schedule = denoiser.schedule
    t = schedule.check_t(t)
    return x0_from_eps(schedule, x_t, t, denoiser(x_t, t, c), clamp)


def draw_noise(rng, n, dim, steps):
    """The (t, eps) draw used by every training loop, in a fixed order."""
    t = rng.integers(1, steps + 1, size=n)
    eps = rng.normal((n, dim))
    return t, eps


def denoising_terms(denoiser, x0, c, t, eps):
    """Epsilon-prediction loss plus the pieces stage-2 training reuses."""
    x_t = forward_noise(denoiser.schedule, x0, t, eps)
    eps_hat = denoiser(x_t, t, c)
    return mse(eps_hat, Tensor(eps)), x_t, eps_hat


def diffusion_train_loss(denoiser, x0, c, rng):
    """mse(eps_hat(x_t, t, c), eps) with t ~ U{1..S}, eps ~ N(0, I)."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(len(x0), -1)
    t, eps = draw_noise(rng, x0.shape[0], x0.shape[1], denoiser.schedule.steps)
    return denoising_terms(denoiser, x0, c, t, eps)[0]


def linear_decay(lr, total):
    """Step -> learning rate, falling linearly from ``lr`` towards 0."""
    return lambda step: lr * (1.0 - step / total)


def fit_denoiser(denoiser, batches, condition, optimizer, rng, lr_schedule=None):
    """Plain diffusion training loop.

    ``batches`` yields (x0, cond_input); ``condition`` maps cond_input to the
    condition tensor (it may depend on parameters owned by ``optimizer``).
    ``lr_schedule`` maps the step index to a learning rate. Returns the
    per-step loss values.
    """
    losses = []
    for step, (x0, cond_input) in enumerate(batches):
        if lr_schedule is not None:
            optimizer.lr = lr_schedule(step)
        loss = diffusion_train_loss(denoiser, x0, condition(cond_input), rng)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return losses


def train_denoiser(denoiser, images, conditions, steps, rng, batch_size=32, lr=3e-3, decay=False):
    """Convenience wrapper: fixed condition vectors, random minibatches,
    optionally with linear learning-rate decay."""
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    conditions = np.asarray(conditions, dtype=np.float64)
    batch_rng = rng.child(1)

    def batches():
        for _ in range(steps):
            idx = batch_rng.integers(0, len(images), size=batch_size)
            yield images[idx], conditions[idx]

    opt = Adam(denoiser.parameters(), lr=lr)
    schedule = linear_decay(lr, steps) if decay else None
    return fit_denoiser(denoiser, batches(), Tensor, opt, rng.child(2), schedule)


def sample(denoiser, c, rng, schedule=None):
    """Ancestral sampling from x_S ~ N(0, I); returns (N, image_dim) in [0, 1].

    Uses the posterior variance beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    """
    schedule = schedule or denoiser.schedule
    c = np.atleast_2d(getattr(c, "data", c))
    n = c.shape[0]
    c = Tensor(c)
    x = rng.normal((n, denoiser.image_dim))
    ab, al, be = schedule.alpha_bars, schedule.alphas, schedule.betas
    for t in range(schedule.steps, 0, -1):
        try:
            eps_hat = denoiser(Tensor(x), np.full(n, t), c).data
        except NonFiniteError:
            raise NonFiniteError(f"sampling produced non-finite values at timestep {t}") from None
        mean = (x - be[t] / np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(al[t])
        if t > 1:
            var = (1.0 - ab[t - 1]) / (1.0 - ab[t]) * be[t]
            x = mean + np.sqrt(var) * rng.normal(mean.shape)
        else:
            x = mean
        if not np.isfinite(x).all():
            raise NonFiniteError(f"sampling produced non-finite values at timestep {t}")
    return np.clip(x, 0.0, 1.0)


def write_pgm(image, path):
    """Binary PGM (P5, 8-bit)."""
    img = np.asarray(image, dtype=np.float64)
    side = int(round(math.sqrt(img.size)))
    img = img.reshape(side, side)
    pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    # header as written by write_pgm: three newline-terminated lines
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in dims.split())
    maxval = int(maxval)
    pixels = np.frombuffer(body[: w * h], dtype=np.uint8)
    return pixels.reshape(h, w) / float(maxval)
