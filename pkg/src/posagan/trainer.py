"""Four-stream adversarial training: within-domain reconstruction (t2t, c2c)
with encoded styles, cross-domain translation (t2c, c2t) with prior-sampled
styles; one discriminator step then one generator step per iteration.

All randomness is counter-based on (seed, purpose, iteration), so a resumed
run reproduces an uninterrupted one bit-for-bit.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import Config, PanopticMap, Rng
from .discriminator import Discriminator
from .generator import (ContentEncoder, DecodeHead, ObjectStyleCode,
                        StyleEncoder, feature_mask, sample_style_prior,
                        to_layout)
from .losses import (FeaturePyramid, LossBreakdown, hinge_d, hinge_g, kl_loss,
                     latent_recon_l1, perceptual_loss, recon_l1, total_loss,
                     weighted_total)
from .nnblocks import CheckpointError, init_module, load_arrays, roi_align, save_arrays
from .synthdata import Sample, read_dataset

__all__ = ["TrainState", "NumericError", "train_step", "fit",
           "save_checkpoint", "load_checkpoint", "LOSS_CSV_COLUMNS"]

LOSS_CSV_COLUMNS = ("iteration", "adv_d", "adv_g", "recon_img", "kl",
                    "recon_latent", "perceptual", "total_g", "total_d")


class NumericError(RuntimeError):
    """A loss term became non-finite; carries the offending term's name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


@dataclass
class BatchData:
    imgs_a: torch.Tensor        # (B, 3, H, W) domain A ("t")
    imgs_b: torch.Tensor        # (B, 3, H, W) domain B ("c")
    maps: list[PanopticMap]
    boxes: torch.Tensor         # (sum_m, 5) with batch index
    cats: torch.Tensor          # (sum_m,)
    batch_idx: torch.Tensor     # (sum_m,)
    lengths: torch.Tensor       # (B,)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "BatchData":
        imgs_a = torch.stack([torch.from_numpy(s.a).permute(2, 0, 1) for s in samples])
        imgs_b = torch.stack([torch.from_numpy(s.b).permute(2, 0, 1) for s in samples])
        maps = [s.pmap for s in samples]
        boxes, cats, bidx = [], [], []
        for k, pmap in enumerate(maps):
            b = pmap.boxes()
            boxes.append(np.concatenate([np.full((len(b), 1), k, dtype=np.float64), b], axis=1))
            cats.append(pmap.categories())
            bidx.extend([k] * len(b))
        return cls(
            imgs_a, imgs_b, maps,
            torch.from_numpy(np.concatenate(boxes)).float(),
            torch.from_numpy(np.concatenate(cats)),
            torch.tensor(bidx, dtype=torch.long),
            torch.tensor([len(m) for m in maps], dtype=torch.long),
        )

    @property
    def n(self) -> int:
        return self.imgs_a.shape[0]


class TrainState:
    """All trainable parameter groups, optimizers, and the iteration counter."""

    MODULE_NAMES = ("enc_t", "enc_c", "se_t", "se_c", "head_t", "head_c",
                    "disc_t", "disc_c")

    def __init__(self, cfg: Config):
        cfg.validate()
        self.cfg = cfg
        self.rng = Rng(cfg.seed)
        self.enc_t = ContentEncoder(cfg)
        self.enc_c = ContentEncoder(cfg)
        self.se_t = StyleEncoder(cfg)
        self.se_c = StyleEncoder(cfg)
        self.head_t = DecodeHead(cfg)
        self.head_c = DecodeHead(cfg)
        self.disc_t = Discriminator(cfg)
        self.disc_c = Discriminator(cfg)
        self.phi = FeaturePyramid(seed=0)  # frozen; rebuilt, never checkpointed
        for name in self.MODULE_NAMES:
            zero = Discriminator.ZERO_HEADS if name.startswith("disc") else ()
            init_module(getattr(self, name), self.rng, prefix=name, zero_names=zero)
        self.opt_g = torch.optim.Adam(
            self._params(("enc_t", "enc_c", "se_t", "se_c", "head_t", "head_c")),
            lr=cfg.lr_G, betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.opt_d = torch.optim.Adam(
            self._params(("disc_t", "disc_c")),
            lr=cfg.lr_D, betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.iteration = 0

    def _params(self, names):
        return [p for n in names for _, p in
                sorted(getattr(self, n).named_parameters())]

    def named_parameters(self) -> "OrderedDict[str, torch.nn.Parameter]":
        out: OrderedDict[str, torch.nn.Parameter] = OrderedDict()
        for name in self.MODULE_NAMES:
            for pname, p in sorted(getattr(self, name).named_parameters()):
                out[f"{name}.{pname}"] = p
        return out

    # --- generation helpers -------------------------------------------------

    def _crops(self, enc: ContentEncoder, imgs: torch.Tensor, batch: BatchData) -> torch.Tensor:
        fm = enc.features(imgs)
        scale = self.cfg.feature_size / self.cfg.image_size
        return roi_align(fm, batch.boxes, self.cfg.roi_size, spatial_scale=scale)

    def _decode(self, head: DecodeHead, crops: torch.Tensor, batch: BatchData,
                style_sample: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        aligned = head.style_align(crops, batch.cats, style_sample)
        hl = cfg.feature_size
        max_m = int(batch.lengths.max())
        layouts = aligned.new_zeros(batch.n, max_m, cfg.d_C, hl, hl)
        pos = 0
        for k, pmap in enumerate(batch.maps):
            for t, obj in enumerate(pmap.objects):
                placed = to_layout(aligned[pos], obj.bbox, cfg)
                layouts[k, t] = feature_mask(placed, obj.mask, cfg)
                pos += 1
        hidden = head.compose(layouts, batch.lengths)
        return head.decode(hidden)

    def _segmean(self, per_obj: torch.Tensor, batch: BatchData) -> torch.Tensor:
        acc = per_obj.new_zeros(batch.n)
        acc = acc.index_add(0, batch.batch_idx, per_obj)
        return acc / batch.lengths.to(per_obj.dtype)

    def translate_sample(self, sample: Sample, direction: str,
                         rng_stream: np.random.Generator) -> np.ndarray:
        """Single-image cross-domain translation with a fresh prior style."""
        src = sample.a if direction == "t2c" else sample.b
        enc = self.enc_t if direction == "t2c" else self.enc_c
        head = self.head_c if direction == "t2c" else self.head_t
        img = torch.from_numpy(src).permute(2, 0, 1)
        styles = sample_style_prior(len(sample.pmap), self.cfg, rng_stream)
        with torch.no_grad():
            content = enc(img, torch.from_numpy(sample.pmap.boxes()).float())
            cats = torch.from_numpy(sample.pmap.categories())
            aligned = head.style_align(content, cats, styles.sample)
            outs = []
            for i, obj in enumerate(sample.pmap.objects):
                placed = to_layout(aligned[i], obj.bbox, self.cfg)
                outs.append(feature_mask(placed, obj.mask, self.cfg))
            hidden = head.compose(torch.stack(outs))
            out = head.decode(hidden)
        return out.permute(1, 2, 0).numpy()

    def reconstruct_sample(self, sample: Sample, domain: str) -> np.ndarray:
        """Within-domain reconstruction with the encoded (mean) style."""
        src = sample.a if domain == "t" else sample.b
        enc = self.enc_t if domain == "t" else self.enc_c
        se = self.se_t if domain == "t" else self.se_c
        head = self.head_t if domain == "t" else self.head_c
        img = torch.from_numpy(src).permute(2, 0, 1)
        with torch.no_grad():
            content = enc(img, torch.from_numpy(sample.pmap.boxes()).float())
            style = se(content)  # xi = 0 -> deterministic mean style
            cats = torch.from_numpy(sample.pmap.categories())
            aligned = head.style_align(content, cats, style.sample)
            outs = []
            for i, obj in enumerate(sample.pmap.objects):
                placed = to_layout(aligned[i], obj.bbox, self.cfg)
                outs.append(feature_mask(placed, obj.mask, self.cfg))
            out = head.decode(head.compose(torch.stack(outs)))
        return out.permute(1, 2, 0).numpy()


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    v = float(value.detach())
    if not np.isfinite(v):
        raise NumericError(name, v)
    return value


def _style_xi(stream: np.random.Generator, shape, dtype) -> torch.Tensor:
    return torch.from_numpy(stream.standard_normal(tuple(shape))).to(dtype)


def train_step(state: TrainState, batch: BatchData) -> tuple[TrainState, tuple[LossBreakdown, LossBreakdown], dict]:
    """One discriminator step then one generator step over all four streams.

    Returns (state, (generator breakdown, discriminator breakdown), monitor)
    where monitor carries detached per-stream paired L1 values.
    """
    cfg = state.cfg
    it = state.iteration + 1
    rng = state.rng

    crops_t = state._crops(state.enc_t, batch.imgs_a, batch)
    crops_c = state._crops(state.enc_c, batch.imgs_b, batch)
    n_obj = crops_t.shape[0]

    s_t = state.se_t(crops_t, xi=_style_xi(rng.stream("xi", "t", it), (n_obj, cfg.d_S),
                                           crops_t.dtype))
    s_c = state.se_c(crops_c, xi=_style_xi(rng.stream("xi", "c", it), (n_obj, cfg.d_S),
                                           crops_c.dtype))
    s_rc = sample_style_prior(n_obj, cfg, rng.stream("prior", "c", it), dtype=crops_t.dtype)
    s_rt = sample_style_prior(n_obj, cfg, rng.stream("prior", "t", it), dtype=crops_t.dtype)

    t2t = state._decode(state.head_t, crops_t, batch, s_t.sample)
    c2c = state._decode(state.head_c, crops_c, batch, s_c.sample)
    t2c = state._decode(state.head_c, crops_t, batch, s_rc.sample)
    c2t = state._decode(state.head_t, crops_c, batch, s_rt.sample)

    # --- discriminator step -------------------------------------------------
    d_parts = LossBreakdown()
    if not cfg.disable_adv:
        d_loss = 0.0
        adv_d = 0.0
        for disc, real, fake in ((state.disc_c, batch.imgs_b, t2c.detach()),
                                 (state.disc_t, batch.imgs_a, c2t.detach())):
            si_r, sr_r, sc_r = disc(real, batch.boxes)
            si_f, sr_f, _ = disc(fake, batch.boxes)
            hd = 0.5 * (hinge_d(si_r, state._segmean(sr_r, batch), True, cfg.lambda_obj)
                        + hinge_d(si_f, state._segmean(sr_f, batch), False, cfg.lambda_obj))
            ce = F.cross_entropy(sc_r, batch.cats)
            adv_d = adv_d + hd
            d_loss = d_loss + hd + ce
        adv_d = _check_finite("adv_d", adv_d / 2)
        d_loss = _check_finite("total_d", d_loss / 2)
        state.opt_d.zero_grad()
        d_loss.backward()
        state.opt_d.step()
        d_parts.adv = float(adv_d.detach())
        d_parts.total = float(d_loss.detach())

    # --- generator step ------------------------------------------------------
    parts: dict[str, torch.Tensor] = {}
    if not cfg.disable_adv:
        for p in list(state.disc_c.parameters()) + list(state.disc_t.parameters()):
            p.requires_grad_(False)
        adv_g = 0.0
        for disc, fake in ((state.disc_c, t2c), (state.disc_t, c2t)):
            si_f, sr_f, sc_f = disc(fake, batch.boxes)
            ll = F.log_softmax(sc_f, dim=-1).gather(1, batch.cats.view(-1, 1)).squeeze(1)
            p_obj = state._segmean(sr_f, batch) + state._segmean(ll, batch)
            adv_g = adv_g + hinge_g(si_f, p_obj, cfg.lambda_obj)
        parts["adv"] = _check_finite("adv_g", adv_g / 2)
        for p in list(state.disc_c.parameters()) + list(state.disc_t.parameters()):
            p.requires_grad_(True)
    if not cfg.disable_recon_img:
        parts["recon_img"] = _check_finite(
            "recon_img", 0.5 * (recon_l1(t2t, batch.imgs_a) + recon_l1(c2c, batch.imgs_b)))
    m_total = int(batch.lengths.sum())
    if not cfg.disable_kl:
        # per-coordinate normalization keeps this term on the same scale as
        # the image reconstruction L1 regardless of object count or code size
        parts["kl"] = _check_finite(
            "kl", (kl_loss(s_t.mu, s_t.logvar) + kl_loss(s_c.mu, s_c.logvar))
            / (2 * m_total * cfg.d_S))
    if not cfg.disable_recon_latent:
        re_c = state.se_c(state._crops(state.enc_c, t2c, batch))
        re_t = state.se_t(state._crops(state.enc_t, c2t, batch))
        # normalized per object (not per coordinate): embedding a recoverable
        # style code into the output is a weak learning signal, so this term
        # keeps its sum over code dims to stay influential next to the
        # per-pixel reconstruction terms
        parts["recon_latent"] = _check_finite(
            "recon_latent",
            (latent_recon_l1(re_c.mu, s_rc.sample)
             + latent_recon_l1(re_t.mu, s_rt.sample))
            / (2 * m_total))
    if not cfg.disable_perceptual:
        parts["perceptual"] = _check_finite(
            "perceptual", 0.5 * (perceptual_loss(batch.imgs_b, t2c, state.phi)
                                 + perceptual_loss(batch.imgs_a, c2t, state.phi)))

    g_loss = weighted_total(parts, cfg)
    if parts:
        state.opt_g.zero_grad()
        g_loss.backward()
        state.opt_g.step()
    g_break = total_loss(parts, cfg)

    monitor = {
        "t2c": float(recon_l1(t2c.detach(), batch.imgs_b)),
        "c2t": float(recon_l1(c2t.detach(), batch.imgs_a)),
        "t2t": float(recon_l1(t2t.detach(), batch.imgs_a)),
        "c2c": float(recon_l1(c2c.detach(), batch.imgs_b)),
    }
    state.iteration = it
    return state, (g_break, d_parts), monitor


# --- checkpointing -----------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    arrays["meta/config"] = np.frombuffer(state.cfg.to_text().encode(), dtype=np.uint8)
    arrays["meta/iteration"] = np.array([state.iteration], dtype=np.int64)
    named = state.named_parameters()
    for name, p in named.items():
        arrays[f"param/{name}"] = p.detach().numpy().astype(np.float32)
    for opt_name, opt in (("G", state.opt_g), ("D", state.opt_d)):
        index_to_name = _optimizer_param_names(state, opt_name)
        for i, p in enumerate(opt.param_groups[0]["params"]):
            st = opt.state.get(p)
            if not st:
                continue
            pname = index_to_name[i]
            arrays[f"adam/{opt_name}/{pname}/step"] = np.array(
                [int(st["step"])], dtype=np.int64)
            arrays[f"adam/{opt_name}/{pname}/exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
            arrays[f"adam/{opt_name}/{pname}/exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
    save_arrays(path, arrays)


def _optimizer_param_names(state: TrainState, opt_name: str) -> list[str]:
    groups = (("enc_t", "enc_c", "se_t", "se_c", "head_t", "head_c")
              if opt_name == "G" else ("disc_t", "disc_c"))
    names = []
    for mod in groups:
        names.extend(f"{mod}.{n}" for n, _ in
                     sorted(getattr(state, mod).named_parameters()))
    return names


def load_checkpoint(path) -> TrainState:
    arrays = load_arrays(path)
    try:
        cfg = Config.from_text(bytes(arrays.pop("meta/config")).decode())
        iteration = int(arrays.pop("meta/iteration")[0])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing {e}") from e
    state = TrainState(cfg)
    named = state.named_parameters()
    with torch.no_grad():
        for name, p in named.items():
            key = f"param/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            p.copy_(torch.from_numpy(arrays.pop(key).copy()))
    for opt_name, opt in (("G", state.opt_g), ("D", state.opt_d)):
        index_to_name = _optimizer_param_names(state, opt_name)
        for i, p in enumerate(opt.param_groups[0]["params"]):
            pname = index_to_name[i]
            key = f"adam/{opt_name}/{pname}"
            if f"{key}/step" not in arrays:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(arrays.pop(f"{key}/step")[0])),
                "exp_avg": torch.from_numpy(arrays.pop(f"{key}/exp_avg").copy()),
                "exp_avg_sq": torch.from_numpy(arrays.pop(f"{key}/exp_avg_sq").copy()),
            }
    state.iteration = iteration
    return state


# --- training loop -----------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _save_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def fit(cfg: Config, dataset_dir, out_dir, state: TrainState | None = None):
    """Run cfg.iterations training steps; writes losses.csv, paired_l1.csv,
    periodic checkpoints and sample translations under out_dir."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    samples = read_dataset(dataset_dir)
    if state is None:
        state = TrainState(cfg)
    else:
        for key in ("image_size", "max_objects", "CAT", "thing_cats", "d_C", "d_S",
                    "d_L", "d_Src", "roi_size", "layout_scale", "clstm_layers",
                    "clstm_hidden", "seed"):
            if getattr(state.cfg, key) != getattr(cfg, key):
                raise ValueError(f"checkpoint config mismatch on {key}: "
                                 f"{getattr(state.cfg, key)} != {getattr(cfg, key)}")
        state.cfg = cfg
    rng = state.rng

    loss_rows: list[list[str]] = []
    paired_rows: list[list[str]] = []
    start = state.iteration
    for _ in range(start, cfg.iterations):
        it = state.iteration + 1
        idx = rng.stream("batch", it).integers(0, len(samples), size=cfg.batch_size)
        batch = BatchData.from_samples([samples[int(i)] for i in idx])
        state, (g, d), mon = train_step(state, batch)
        loss_rows.append([
            str(it),
            _fmt(d.adv) if not cfg.disable_adv else "",
            _fmt(g.adv) if not cfg.disable_adv else "",
            _fmt(g.recon_img) if not cfg.disable_recon_img else "",
            _fmt(g.kl) if not cfg.disable_kl else "",
            _fmt(g.recon_latent) if not cfg.disable_recon_latent else "",
            _fmt(g.perceptual) if not cfg.disable_perceptual else "",
            _fmt(g.total),
            _fmt(d.total) if not cfg.disable_adv else "",
        ])
        paired_rows.append([str(it)] + [_fmt(mon[k]) for k in ("t2c", "c2t", "t2t", "c2c")])
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            save_checkpoint(state, out / "checkpoints" / f"iter_{it:06d}.ckpt")
        if it % cfg.sample_every == 0 or it == cfg.iterations:
            smp = samples[0]
            _save_png(state.translate_sample(smp, "t2c", rng.stream("sample_vis", "t2c", it)),
                      out / "samples" / f"iter_{it:06d}_t2c.png")
            _save_png(state.translate_sample(smp, "c2t", rng.stream("sample_vis", "c2t", it)),
                      out / "samples" / f"iter_{it:06d}_c2t.png")
            _save_png(state.reconstruct_sample(smp, "t"), out / "samples" / f"iter_{it:06d}_t2t.png")
            _save_png(state.reconstruct_sample(smp, "c"), out / "samples" / f"iter_{it:06d}_c2c.png")

    if state.iteration == 0:
        # iterations == 0: checkpoint the untouched initialisation
        save_checkpoint(state, out / "checkpoints" / "iter_000000.ckpt")
    with open(out / "losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_CSV_COLUMNS)
        w.writerows(loss_rows)
    with open(out / "paired_l1.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "t2c", "c2t", "t2t", "c2c"))
        w.writerows(paired_rows)
    return state
