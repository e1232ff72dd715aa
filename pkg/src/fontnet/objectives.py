"""Loss functions for the separator, generator and discriminator.

All functions accept torch tensors and return scalar tensors, so they are
differentiable; batched inputs are reduced by the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import DimMismatch, NonFinite, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_gstyle: float = 1.0
    lambda_encstyle: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossReport:
    step: int
    adv_d: float
    adv_g: float
    l1: float
    g_style: float
    enc_style: float
    total_g: float
    r1: float = 0.0

    def as_dict(self):
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for k, v in asdict(self).items() if k != "step")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def triplet_loss(fa, fp, fn, alpha: float = 0.2):
    """max(0, |fa - fp|^2 - |fa - fn|^2 + alpha), mean over leading batch axes."""
    fa, fp, fn = _as_tensor(fa), _as_tensor(fp), _as_tensor(fn)
    if not (fa.shape == fp.shape == fn.shape):
        raise DimMismatch(f"embedding shapes differ: {tuple(fa.shape)}, {tuple(fp.shape)}, {tuple(fn.shape)}")
    if alpha <= 0:
        raise ValueError("margin alpha must be positive")
    d_ap = (fa - fp).pow(2).sum(dim=-1)
    d_an = (fa - fn).pow(2).sum(dim=-1)
    return torch.clamp(d_ap - d_an + alpha, min=0.0).mean()


def gen_style_triplet_loss(f_y, fp, fn, alpha: float = 0.2):
    """Triplet loss with the generated glyph's embedding as the anchor."""
    return triplet_loss(f_y, fp, fn, alpha)


def adv_losses(real_logit, fake_logit):
    """Log-likelihood GAN losses for one discriminator head.

    d_loss = -[log p_real + log(1 - p_fake)], g_loss = -log p_fake
    (non-saturating), with p = sigmoid(logit). Batched inputs are averaged.
    """
    real_logit, fake_logit = _as_tensor(real_logit), _as_tensor(fake_logit)
    if not (torch.isfinite(real_logit).all() and torch.isfinite(fake_logit).all()):
        raise NonFinite("adversarial logits must be finite")
    # softplus(-z) = -log sigmoid(z); softplus(z) = -log(1 - sigmoid(z))
    d_loss = (F.softplus(-real_logit) + F.softplus(fake_logit)).mean()
    g_loss = F.softplus(-fake_logit).mean()
    return d_loss, g_loss


def l1_loss(gt, y):
    gt, y = _as_tensor(gt), _as_tensor(y)
    if gt.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(gt.shape)} vs {tuple(y.shape)}")
    return (gt - y).abs().mean()


def total_generator_objective(adv_g, l1, g_style, enc_style, weights: LossWeights = LossWeights()):
    terms = [_as_tensor(t) for t in (adv_g, l1, g_style, enc_style)]
    if not all(torch.isfinite(t).all() for t in terms):
        raise NonFinite("objective terms must be finite")
    adv_g, l1, g_style, enc_style = terms
    return adv_g + weights.lambda_l1 * l1 + weights.lambda_gstyle * g_style + weights.lambda_encstyle * enc_style


def r1_penalty(real_scores: torch.Tensor, real_images: torch.Tensor, gamma: float) -> torch.Tensor:
    """gamma / 2 * E |grad_x D(x)|^2 on real inputs; graph is kept for the D update."""
    if gamma == 0:
        return real_scores.new_zeros(())
    (grad,) = torch.autograd.grad(real_scores.sum(), real_images, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()
