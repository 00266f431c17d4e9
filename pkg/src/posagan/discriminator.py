"""Discriminator with an image-level realness head and an object-level head
(realness + auxiliary category classifier) over RoIAligned crops.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import Config, PanopticMap, Rng
from .nnblocks import LEAKY_SLOPE, ResBlock, conv3, init_module, roi_align

__all__ = ["DiscriminatorOutput", "Discriminator", "object_score"]


@dataclass
class DiscriminatorOutput:
    s_img: torch.Tensor    # scalar realness score
    s_real: torch.Tensor   # (m,) per-object realness
    s_cls: torch.Tensor    # (m, CAT) category logits


class Discriminator(nn.Module):
    """stem + two stride-2 downsamples + 2 residual blocks, then the two heads.

    The scalar scoring heads are zero-initialised so untrained scores are
    exactly 0 (hinge losses start at their margin value).
    """

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        c = cfg.d_C
        self.stem = conv3(3, c // 2, pad_mode="zeros")
        self.down1 = conv3(c // 2, c, stride=2, pad_mode="zeros")
        self.down2 = conv3(c, c, stride=2, pad_mode="zeros")
        self.blocks = nn.ModuleList([ResBlock(c, pad_mode="zeros") for _ in range(2)])
        self.img_head = nn.Linear(c, 1)
        self.obj_fc = nn.Linear(c * cfg.roi_size * cfg.roi_size, c)
        self.real_head = nn.Linear(c, 1)
        self.cls_head = nn.Linear(c, cfg.CAT)

    ZERO_HEADS = ("img_head.weight", "img_head.bias", "real_head.weight", "real_head.bias")

    @classmethod
    def fresh(cls, cfg: Config, rng: Rng, name: str = "D") -> "Discriminator":
        d = cls(cfg)
        init_module(d, rng, prefix=name, zero_names=cls.ZERO_HEADS)
        return d

    def features(self, img: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.stem(img), LEAKY_SLOPE)
        x = F.leaky_relu(self.down1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.down2(x), LEAKY_SLOPE)
        for blk in self.blocks:
            x = blk(x)
        return x

    def forward(self, img: torch.Tensor, boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Batched scores: img (B,3,H,W) or (3,H,W); boxes (m,5) with batch
        index (or (m,4) for a single image).  Returns (s_img per image,
        s_real per object, s_cls per object)."""
        squeeze = img.dim() == 3
        x = img.unsqueeze(0) if squeeze else img
        fm = self.features(x)
        s_img = self.img_head(fm.mean(dim=(-2, -1))).squeeze(-1)
        scale = self.cfg.feature_size / self.cfg.image_size
        crops = roi_align(fm, boxes, self.cfg.roi_size, spatial_scale=scale)
        h = F.leaky_relu(self.obj_fc(crops.reshape(crops.shape[0], -1)), LEAKY_SLOPE)
        s_real = self.real_head(h).squeeze(-1)
        s_cls = self.cls_head(h)
        if squeeze:
            s_img = s_img.squeeze(0)
        return s_img, s_real, s_cls

    def discriminate(self, img: torch.Tensor, pmap: PanopticMap) -> DiscriminatorOutput:
        boxes = torch.from_numpy(pmap.boxes()).to(img.dtype)
        s_img, s_real, s_cls = self.forward(img, boxes)
        return DiscriminatorOutput(s_img, s_real, s_cls)


def object_score(out: DiscriminatorOutput, categories: torch.Tensor) -> torch.Tensor:
    """s_obj = mean object realness + mean true-category log-likelihood."""
    if categories.shape[0] != out.s_real.shape[0]:
        raise ValueError("categories length != object count")
    logp = F.log_softmax(out.s_cls, dim=-1)
    ll = logp.gather(1, categories.view(-1, 1)).squeeze(1)
    return out.s_real.mean() + ll.mean()
