"""Generator: content extraction, per-object style-align, masked layout
composition through a cLSTM, and decoding back to an image.

A translation couples the source domain's content encoder with the target
domain's decode head (style projection + category embedding + cLSTM +
decoder); style codes come from the target domain's style encoder for
within-domain reconstruction or from the unit-Gaussian prior for cross-domain
translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Config, PanopticMap, Rng
from .nnblocks import (LEAKY_SLOPE, ConvLSTM, ResBlock, adain, conv3,
                       init_module, roi_align)

__all__ = [
    "ObjectStyleCode", "ContentEncoder", "StyleEncoder", "DecodeHead",
    "TranslationModel", "sample_style_prior", "to_layout", "feature_mask",
]

LOGVAR_CLAMP = 20.0


@dataclass
class ObjectStyleCode:
    """Per-object style latent: Gaussian parameters plus the drawn sample.

    Prior-sampled codes carry mu = 0, logvar = 0 and the raw draw as sample.
    Tensors are (m, d) so a whole map's codes travel together.
    """

    mu: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    xi: torch.Tensor  # recorded reparameterization noise

    def __len__(self) -> int:
        return self.mu.shape[0]


class ContentEncoder(nn.Module):
    """stem conv -> two stride-2 downsamples -> 3 residual blocks.

    Replicate padding keeps constant inputs constant through the stack, which
    the per-object codes inherit.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        c = cfg.d_C
        self.stem = conv3(3, c // 2)
        self.down1 = conv3(c // 2, c, stride=2)
        self.down2 = conv3(c, c, stride=2)
        self.blocks = nn.ModuleList([ResBlock(c) for _ in range(3)])
        self.cfg = cfg

    def features(self, img: torch.Tensor) -> torch.Tensor:
        """Image representation at feature resolution (image_size / 4)."""
        x = F.leaky_relu(self.stem(img), LEAKY_SLOPE)
        x = F.leaky_relu(self.down1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.down2(x), LEAKY_SLOPE)
        for blk in self.blocks:
            x = blk(x)
        return x

    def forward(self, img: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Per-object content codes (m, d_C, roi, roi); boxes in image coords,
        (m, 4) for a single image or (m, 5) with batch indices."""
        fm = self.features(img)
        scale = self.cfg.feature_size / self.cfg.image_size
        return roi_align(fm, boxes, self.cfg.roi_size, spatial_scale=scale)


class StyleEncoder(nn.Module):
    """Two stride-2 convs -> global average pool -> (mu, logvar) heads."""

    def __init__(self, cfg: Config):
        super().__init__()
        c = cfg.d_C
        self.c1 = conv3(c, c, stride=2)
        self.c2 = conv3(c, c, stride=2)
        self.mu_head = nn.Linear(c, cfg.d_S)
        self.logvar_head = nn.Linear(c, cfg.d_S)

    def forward(self, codes: torch.Tensor, rng_stream: np.random.Generator | None = None,
                xi: torch.Tensor | None = None) -> ObjectStyleCode:
        if codes.shape[0] < 1:
            raise ValueError("empty content code list")
        x = F.leaky_relu(self.c1(codes), LEAKY_SLOPE)
        x = F.leaky_relu(self.c2(x), LEAKY_SLOPE)
        x = x.mean(dim=(-2, -1))
        mu = self.mu_head(x)
        logvar = torch.clamp(self.logvar_head(x), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        if xi is None:
            if rng_stream is None:
                xi = torch.zeros_like(mu)
            else:
                xi = torch.from_numpy(
                    rng_stream.standard_normal(tuple(mu.shape))).to(mu.dtype)
        sample = mu + torch.exp(0.5 * logvar) * xi
        return ObjectStyleCode(mu, logvar, sample, xi)


def sample_style_prior(m: int, cfg: Config, rng_stream: np.random.Generator,
                       dtype=torch.float32) -> ObjectStyleCode:
    """m independent standard-normal style draws (mu = 0, logvar = 0)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    xi = torch.from_numpy(rng_stream.standard_normal((m, cfg.d_Src))).to(dtype)
    zeros = torch.zeros(m, cfg.d_Src, dtype=dtype)
    return ObjectStyleCode(zeros, zeros.clone(), xi.clone(), xi)


def to_layout(o: torch.Tensor, bbox, cfg: Config) -> torch.Tensor:
    """Place one style-aligned object code into an otherwise-zero layout grid.

    ``o`` is (d, roi, roi); the code is bilinearly up-sampled by layout_scale,
    then bilinearly resized onto the bbox footprint at layout resolution.
    """
    hl = cfg.feature_size
    scale = hl / cfg.image_size
    x0, y0, x1, y1 = bbox
    cx0 = int(np.floor(x0 * scale))
    cy0 = int(np.floor(y0 * scale))
    cx1 = min(hl, max(cx0 + 1, int(np.ceil(x1 * scale))))
    cy1 = min(hl, max(cy0 + 1, int(np.ceil(y1 * scale))))
    if cx1 <= cx0 or cy1 <= cy0:
        raise ValueError(f"bbox {bbox} has no layout footprint")
    up = F.interpolate(o.unsqueeze(0), scale_factor=cfg.layout_scale,
                       mode="bilinear", align_corners=False)
    fit = F.interpolate(up, size=(cy1 - cy0, cx1 - cx0),
                        mode="bilinear", align_corners=False)[0]
    out = o.new_zeros(o.shape[0], hl, hl)
    out[:, cy0:cy1, cx0:cx1] = fit
    return out


def feature_mask(o_bbox: torch.Tensor, mask: np.ndarray, cfg: Config) -> torch.Tensor:
    """Elementwise masking at layout resolution (area-averaged, >= 0.5 kept)."""
    hl = cfg.feature_size
    m = torch.as_tensor(mask, dtype=o_bbox.dtype)
    if mask.shape != (hl, hl):
        k = mask.shape[0] // hl
        m = F.avg_pool2d(m.unsqueeze(0).unsqueeze(0), kernel_size=k)[0, 0]
    m = (m >= 0.5).to(o_bbox.dtype)
    return o_bbox * m.unsqueeze(0)


class DecodeHead(nn.Module):
    """Target-domain half of a translation: style-align + compose + decode."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.CAT, cfg.d_L)
        self.style_proj = nn.Linear(cfg.d_Src + cfg.d_L, 2 * cfg.d_C)
        self.clstm = ConvLSTM(cfg.d_C, cfg.clstm_hidden, cfg.clstm_layers)
        h = cfg.clstm_hidden
        self.dec_blocks = nn.ModuleList([ResBlock(h) for _ in range(3)])
        self.up1 = nn.ConvTranspose2d(h, h, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(h, h // 2, 4, stride=2, padding=1)
        self.out_conv = conv3(h // 2, 3)

    def embed_category(self, category_ids: torch.Tensor) -> torch.Tensor:
        if (category_ids < 0).any() or (category_ids >= self.cfg.CAT).any():
            raise ValueError("category id outside [0, CAT)")
        return self.embedding(category_ids)

    def style_align(self, content: torch.Tensor, category_ids: torch.Tensor,
                    style_sample: torch.Tensor) -> torch.Tensor:
        """AdaIN the content codes with (scale, bias) projected from the
        concatenated style sample and category embedding.

        The projection emits a scale offset around 1, so zero weights give
        scale = 1, bias = 0 (pure instance normalization).
        """
        lat = self.embed_category(category_ids)
        v = torch.cat([style_sample, lat], dim=-1)
        proj = self.style_proj(v)
        d = self.cfg.d_C
        scale = 1.0 + proj[..., :d]
        bias = proj[..., d:]
        return adain(content, scale, bias)

    def compose(self, layouts: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.clstm(layouts, lengths)

    def decode(self, hidden: torch.Tensor) -> torch.Tensor:
        squeeze = hidden.dim() == 3
        x = hidden.unsqueeze(0) if squeeze else hidden
        for blk in self.dec_blocks:
            x = blk(x)
        x = F.leaky_relu(self.up1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.up2(x), LEAKY_SLOPE)
        x = torch.tanh(self.out_conv(x))
        return x.squeeze(0) if squeeze else x


class TranslationModel(nn.Module):
    """Content encoder, style encoder and decode head for one (source, target)
    domain pairing; full G(src | P, S; Theta_G)."""

    def __init__(self, cfg: Config, encoder: ContentEncoder,
                 style_encoder: StyleEncoder, head: DecodeHead):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder
        self.style_encoder = style_encoder
        self.head = head

    @classmethod
    def fresh(cls, cfg: Config, rng: Rng, name: str = "G") -> "TranslationModel":
        model = cls(cfg, ContentEncoder(cfg), StyleEncoder(cfg), DecodeHead(cfg))
        init_module(model, rng, prefix=name)
        return model

    def encode_content(self, img: torch.Tensor, pmap: PanopticMap) -> torch.Tensor:
        boxes = torch.from_numpy(pmap.boxes())
        return self.encoder(img, boxes.to(img.dtype))

    def masked_layouts(self, content: torch.Tensor, pmap: PanopticMap,
                       styles: ObjectStyleCode) -> torch.Tensor:
        cats = torch.from_numpy(pmap.categories())
        aligned = self.head.style_align(content, cats, styles.sample)
        outs = []
        for i, obj in enumerate(pmap.objects):
            placed = to_layout(aligned[i], obj.bbox, self.cfg)
            outs.append(feature_mask(placed, obj.mask, self.cfg))
        return torch.stack(outs)  # (m, d_C, H_l, W_l)

    def generate(self, img: torch.Tensor, pmap: PanopticMap,
                 styles: ObjectStyleCode) -> torch.Tensor:
        """Full pipeline for a single image (3, H, W) -> (3, H, W) in [-1, 1]."""
        if len(styles) != len(pmap):
            raise ValueError(f"styles length {len(styles)} != object count {len(pmap)}")
        content = self.encode_content(img, pmap)
        layouts = self.masked_layouts(content, pmap, styles)
        hidden = self.head.compose(layouts)
        return self.head.decode(hidden)

    def encode_style(self, img: torch.Tensor, pmap: PanopticMap,
                     rng_stream: np.random.Generator | None = None) -> ObjectStyleCode:
        return self.style_encoder(self.encode_content(img, pmap), rng_stream)
