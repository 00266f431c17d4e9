"""The five objective terms and their weighted total.

Adversarial training uses the fusion hinge (image-level + object-level with
trade-off lambda_obj); reconstruction terms are plain L1; the style prior is
enforced with a diagonal-Gaussian KL; the perceptual term compares frozen
random-feature pyramids (the stand-in for pretrained VGG features at desk
scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import LOSS_NAMES, Config, Rng
from .nnblocks import LEAKY_SLOPE, conv3, init_module

__all__ = [
    "LossBreakdown", "hinge_d", "hinge_g", "recon_l1", "kl_loss",
    "latent_recon_l1", "FeaturePyramid", "perceptual_loss", "total_loss",
]


@dataclass
class LossBreakdown:
    adv: float = 0.0
    recon_img: float = 0.0
    kl: float = 0.0
    recon_latent: float = 0.0
    perceptual: float = 0.0
    total: float = 0.0

    def parts(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in LOSS_NAMES}


def hinge_d(p_img, p_obj, is_real: bool, lambda_obj: float = 1.0) -> torch.Tensor:
    """Discriminator-side fusion hinge, minimised; supports batched scores."""
    p_img = torch.as_tensor(p_img, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(p_img) else p_img
    p_obj = torch.as_tensor(p_obj, dtype=p_img.dtype) \
        if not torch.is_tensor(p_obj) else p_obj
    if is_real:
        l_img = torch.clamp(-1.0 + p_img, max=0.0)
        l_obj = torch.clamp(-1.0 + p_obj, max=0.0)
    else:
        l_img = torch.clamp(-1.0 - p_img, max=0.0)
        l_obj = torch.clamp(-1.0 - p_obj, max=0.0)
    return -(l_img + lambda_obj * l_obj).mean()


def hinge_g(p_img, p_obj, lambda_obj: float = 1.0) -> torch.Tensor:
    """Generator-side adversarial direction: -(p_img + lambda * p_obj)."""
    p_img = torch.as_tensor(p_img, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(p_img) else p_img
    p_obj = torch.as_tensor(p_obj, dtype=p_img.dtype) \
        if not torch.is_tensor(p_obj) else p_obj
    return -(p_img + lambda_obj * p_obj).mean()


def recon_l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Sum over objects and dims of KL(N(mu, diag exp(logvar)) || N(0, I))."""
    if mu.shape[0] < 1:
        raise ValueError("empty style code list")
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum()


def latent_recon_l1(reencoded_mu: torch.Tensor, sampled: torch.Tensor) -> torch.Tensor:
    """Sum over objects of the L1 gap between re-encoded mu and the draw."""
    if reencoded_mu.shape != sampled.shape:
        raise ValueError(f"shape mismatch {tuple(reencoded_mu.shape)} "
                         f"vs {tuple(sampled.shape)}")
    return (reencoded_mu - sampled).abs().sum()


class FeaturePyramid(nn.Module):
    """Frozen, seed-0 orthogonally-initialised 3-stage conv pyramid.

    Stands in for the pretrained VGG max-pool features: three stride-2
    leaky-ReLU conv stages, all parameters frozen at construction.
    """

    CHANNELS = (16, 32, 64)

    def __init__(self, seed: int = 0):
        super().__init__()
        stages = []
        cin = 3
        for cout in self.CHANNELS:
            stages.append(conv3(cin, cout, stride=2, pad_mode="zeros"))
            cin = cout
        self.stages = nn.ModuleList(stages)
        init_module(self, Rng(seed), prefix="phi")
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.unsqueeze(0) if img.dim() == 3 else img
        feats = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), LEAKY_SLOPE)
            feats.append(x)
        return feats


def perceptual_loss(y: torch.Tensor, g: torch.Tensor, phi: FeaturePyramid) -> torch.Tensor:
    """Sum over pyramid levels of the size-normalised L1 feature gap."""
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(g.shape)}")
    total = None
    for fy, fg in zip(phi(y), phi(g)):
        # per-level normalisation by C_k * H_k * W_k, averaged over the batch
        term = (fy - fg).abs().sum(dim=(1, 2, 3)).mean() / fy[0].numel()
        total = term if total is None else total + term
    return total


def total_loss(parts: dict, cfg: Config) -> LossBreakdown:
    """Weighted five-term total; disabled terms contribute exactly zero and
    are reported as 0 in the breakdown."""
    lams = dict(zip(LOSS_NAMES, cfg.lambdas()))
    out = LossBreakdown()
    total = 0.0
    for name in LOSS_NAMES:
        if cfg.disabled(name) or name not in parts or parts[name] is None:
            continue
        val = parts[name]
        val = float(val.detach()) if torch.is_tensor(val) else float(val)
        setattr(out, name, val)
        total += lams[name] * val
    out.total = total
    return out


def weighted_total(parts: dict, cfg: Config):
    """Differentiable counterpart of :func:`total_loss` (tensor result)."""
    lams = dict(zip(LOSS_NAMES, cfg.lambdas()))
    total = None
    for name in LOSS_NAMES:
        if cfg.disabled(name) or name not in parts or parts[name] is None:
            continue
        term = lams[name] * parts[name]
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total
