"""DDPM machinery shared by the composition generator and the base model.

Steps are 1-indexed in the maths (``s = 1..S``) and stored 0-indexed: the
arrays of :class:`NoiseSchedule` hold step ``s`` at index ``s - 1``.

A denoiser is any callable ``denoiser(x_s, s, cond, drop, pad_mask)``
returning a noise prediction shaped like ``x_s``.  ``s`` is a 1-indexed
``LongTensor`` per sample, ``cond`` is ``None`` for the null condition and
``drop`` is a boolean tensor selecting samples whose condition is replaced by
the null condition.  ``pad_mask`` marks padded rows (True = padding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, SamplingDiverged


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self):
        return len(self.betas)

    def tensors(self, dtype=torch.float32):
        return (torch.as_tensor(self.betas, dtype=dtype),
                torch.as_tensor(self.alphas, dtype=dtype),
                torch.as_tensor(self.alpha_bars, dtype=dtype))

    def to_dict(self):
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_betas(cls, betas):
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 2.0
    cond_drop_prob: float = 0.2

    def __post_init__(self):
        if self.omega < 0 or not 0 <= self.cond_drop_prob <= 1:
            raise ConfigError("need omega >= 0 and cond_drop_prob in [0, 1]")


def cosine_schedule(steps, s_offset=0.008):
    """Cosine schedule of Nichol & Dhariwal with betas clipped to [1e-8, 0.999]."""
    if steps < 1:
        raise ConfigError("a schedule needs at least one step")
    t = np.arange(steps + 1, dtype=np.float64) / steps
    f = np.cos((t + s_offset) / (1 + s_offset) * math.pi / 2) ** 2
    abar = f / f[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    return NoiseSchedule.from_betas(betas)


def _per_sample(values, s, like):
    """Gather schedule values for 1-indexed steps and broadcast against ``like``."""
    v = torch.as_tensor(values, dtype=like.dtype)[torch.as_tensor(s).long() - 1]
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def forward_diffuse(x0, s, eps, sched):
    """``x_s = sqrt(abar_s) x0 + sqrt(1 - abar_s) eps``."""
    if eps.shape != x0.shape:
        raise ConfigError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    abar = _per_sample(sched.alpha_bars, s, x0)
    return abar.sqrt() * x0 + (1 - abar).sqrt() * eps


def cfg_noise(eps_cond, eps_uncond, omega):
    """Classifier-free guidance: ``(1 + omega) eps_cond - omega eps_uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ConfigError("conditional and unconditional predictions differ in shape")
    if omega == 0:
        return eps_cond
    return (1 + omega) * eps_cond - omega * eps_uncond


def ddpm_training_loss(denoiser, x0, cond, sched, generator, cond_drop_prob=0.0, pad_mask=None):
    """Noise-prediction loss, averaged over live (unpadded) entries.

    The step, the noise and the condition-drop mask are always drawn, in that
    order, so the random stream does not depend on whether a condition is
    supplied.
    """
    batch = x0.shape[0]
    s = torch.randint(1, sched.steps + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    drop = torch.rand(batch, generator=generator) < cond_drop_prob
    x_s = forward_diffuse(x0, s, eps, sched)
    pred = denoiser(x_s, s, cond, drop, pad_mask)
    if pred.shape != x0.shape:
        raise ConfigError(f"denoiser returned {tuple(pred.shape)} for input {tuple(x0.shape)}")
    sq = (eps - pred) ** 2
    if pad_mask is None:
        return sq.mean()
    live = (~pad_mask).to(sq.dtype).unsqueeze(-1).expand_as(sq)
    return (sq * live).sum() / live.sum()


@torch.no_grad()
def reverse_sample(denoiser, shape, cond, sched, generator, omega=0.0, pad_mask=None, dtype=torch.float32,
                   clip_denoised=None):
    """Ancestral DDPM sampler with posterior variance ``beta_tilde``.

    With a condition and ``omega > 0`` the noise estimate is guided via
    :func:`cfg_noise`; without a condition the null condition is used.

    ``clip_denoised=(low, high)`` clamps the implied clean sample
    ``x0 = (x_s - sqrt(1 - abar_s) eps) / sqrt(abar_s)`` before forming the
    posterior mean.  Without clamping that route gives exactly the
    ``(x_s - beta_s / sqrt(1 - abar_s) eps) / sqrt(alpha_s)`` mean.  It keeps
    an imperfect noise estimate at the last, nearly pure-noise steps from
    being amplified by ``1 / sqrt(alpha_s)``.
    """
    betas, alphas, abars = sched.tensors(torch.float64)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    batch = shape[0]
    no_drop = torch.zeros(batch, dtype=torch.bool)
    all_drop = torch.ones(batch, dtype=torch.bool)
    for s in range(sched.steps, 0, -1):
        steps = torch.full((batch,), s, dtype=torch.long)
        if cond is None:
            eps = denoiser(x, steps, None, all_drop, pad_mask)
        else:
            eps_c = denoiser(x, steps, cond, no_drop, pad_mask)
            eps_u = denoiser(x, steps, cond, all_drop, pad_mask) if omega != 0 else eps_c
            eps = cfg_noise(eps_c, eps_u, omega)
        beta, alpha, abar = float(betas[s - 1]), float(alphas[s - 1]), float(abars[s - 1])
        abar_prev = float(abars[s - 2]) if s > 1 else 1.0
        if clip_denoised is None:
            mean = (x - beta / math.sqrt(1 - abar) * eps) / math.sqrt(alpha)
        else:
            x0 = (x - math.sqrt(1 - abar) * eps) / math.sqrt(abar)
            x0 = torch.maximum(torch.minimum(x0, clip_denoised[1]), clip_denoised[0])
            mean = (math.sqrt(abar_prev) * beta * x0 + math.sqrt(alpha) * (1 - abar_prev) * x) / (1 - abar)
        if s > 1:
            var = beta * (1 - abar_prev) / (1 - abar)
            x = mean + math.sqrt(var) * torch.randn(shape, generator=generator, dtype=dtype)
        else:
            x = mean
        if not torch.isfinite(x).all():
            bad = torch.nonzero(~torch.isfinite(x.reshape(batch, -1)).all(dim=1))
            raise SamplingDiverged(s, int(bad[0, 0]))
    return x
