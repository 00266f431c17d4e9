"""Generator pipeline: content encoding, style codes, layout placement,
masking, composition and decoding."""

import numpy as np
import pytest
import torch

from posagan.core import Rng
from posagan.generator import (ContentEncoder, DecodeHead, StyleEncoder,
                               TranslationModel, feature_mask,
                               sample_style_prior, to_layout)
from posagan.nnblocks import finite_difference_grad, init_module
from posagan.synthdata import generate_dataset

from conftest import tiny_config, two_object_map


CFG = tiny_config()


def fresh_model(seed: int = 0) -> TranslationModel:
    return TranslationModel.fresh(CFG, Rng(seed))


def tiny_sample():
    cfg = tiny_config()
    img = torch.from_numpy(
        np.random.default_rng(0).standard_normal((3, 16, 16)).astype(np.float32)) * 0.3
    return img, two_object_map(), cfg


class TestContentEncoder:
    def test_shape_contract(self):
        img, pmap, cfg = tiny_sample()
        model = fresh_model()
        codes = model.encode_content(img, pmap)
        assert codes.shape == (len(pmap), cfg.d_C, cfg.roi_size, cfg.roi_size)

    def test_constant_input_gives_constant_codes(self):
        img = torch.full((3, 16, 16), 0.25)
        model = fresh_model()
        codes = model.encode_content(img, two_object_map())
        for m in range(codes.shape[0]):
            for ch in range(codes.shape[1]):
                v = codes[m, ch].detach()
                torch.testing.assert_close(v, torch.full_like(v, float(v[0, 0])),
                                           atol=1e-5, rtol=0)

    def test_feature_resolution(self):
        enc = ContentEncoder(CFG)
        fm = enc.features(torch.zeros(1, 3, 16, 16))
        assert fm.shape[-2:] == (CFG.feature_size, CFG.feature_size)


class TestStyleEncoder:
    def test_deterministic_mu_logvar(self):
        img, pmap, _ = tiny_sample()
        model = fresh_model()
        a = model.encode_style(img, pmap)
        b = model.encode_style(img, pmap)
        torch.testing.assert_close(a.mu, b.mu)
        torch.testing.assert_close(a.logvar, b.logvar)

    def test_reparameterization_identity(self):
        img, pmap, _ = tiny_sample()
        code = fresh_model().encode_style(img, pmap, Rng(0).stream("xi"))
        torch.testing.assert_close(
            code.sample, code.mu + torch.exp(0.5 * code.logvar) * code.xi)

    def test_seeded_sampling_reproducible(self):
        img, pmap, _ = tiny_sample()
        model = fresh_model()
        a = model.encode_style(img, pmap, Rng(5).stream("xi"))
        b = model.encode_style(img, pmap, Rng(5).stream("xi"))
        torch.testing.assert_close(a.sample, b.sample)

    def test_logvar_clamped(self):
        img, pmap, _ = tiny_sample()
        code = fresh_model().encode_style(img, pmap)
        assert code.logvar.abs().max() <= 20.0

    def test_empty_input_rejected(self):
        se = StyleEncoder(CFG)
        with pytest.raises(ValueError):
            se(torch.zeros(0, CFG.d_C, CFG.roi_size, CFG.roi_size))

    def test_mu_gradient_matches_fd(self):
        torch.manual_seed(0)
        se = StyleEncoder(CFG).double()
        x = torch.randn(2, CFG.d_C, CFG.roi_size, CFG.roi_size, dtype=torch.float64)
        w = torch.randn(2, CFG.d_S, dtype=torch.float64)

        def fn(v):
            return (se(v).mu * w).sum()

        x_req = x.clone().requires_grad_(True)
        (se(x_req).mu * w).sum().backward()
        fd = finite_difference_grad(fn, x)
        err = float((x_req.grad - fd).norm() / (fd.norm() + 1e-12))
        assert err < 1e-4


class TestStylePrior:
    def test_moments(self):
        draws = sample_style_prior(25_000, tiny_config(), Rng(0).stream("prior"))
        flat = draws.sample.reshape(-1).numpy()
        assert abs(flat.mean()) < 0.02
        assert abs(flat.var() - 1.0) < 0.05

    def test_mu_logvar_zero(self):
        code = sample_style_prior(3, CFG, Rng(0).stream("p"))
        assert code.mu.abs().sum() == 0
        assert code.logvar.abs().sum() == 0

    def test_deterministic(self):
        a = sample_style_prior(4, CFG, Rng(2).stream("p"))
        b = sample_style_prior(4, CFG, Rng(2).stream("p"))
        torch.testing.assert_close(a.sample, b.sample)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            sample_style_prior(0, CFG, Rng(0).stream("p"))


class TestStyleAlign:
    def test_zero_projection_gives_instance_norm(self):
        head = DecodeHead(CFG)
        init_module(head, Rng(0), prefix="h")
        with torch.no_grad():
            head.style_proj.weight.zero_()
            head.style_proj.bias.zero_()
        content = torch.randn(2, CFG.d_C, CFG.roi_size, CFG.roi_size)
        out = head.style_align(content, torch.tensor([0, 1]),
                               torch.randn(2, CFG.d_Src))
        from posagan.nnblocks import adain
        torch.testing.assert_close(
            out, adain(content, torch.ones(2, CFG.d_C), torch.zeros(2, CFG.d_C)))

    def test_style_changes_channel_statistics(self):
        head = DecodeHead(CFG)
        init_module(head, Rng(0), prefix="h")
        content = torch.randn(1, CFG.d_C, CFG.roi_size, CFG.roi_size)
        cats = torch.tensor([0])
        s1 = torch.randn(1, CFG.d_Src, generator=torch.Generator().manual_seed(1))
        s2 = torch.randn(1, CFG.d_Src, generator=torch.Generator().manual_seed(2))
        m1 = head.style_align(content, cats, s1).mean(dim=(-2, -1))
        m2 = head.style_align(content, cats, s2).mean(dim=(-2, -1))
        assert not torch.allclose(m1, m2)

    def test_category_changes_output(self):
        head = DecodeHead(CFG)
        init_module(head, Rng(0), prefix="h")
        content = torch.randn(1, CFG.d_C, CFG.roi_size, CFG.roi_size)
        style = torch.randn(1, CFG.d_Src)
        a = head.style_align(content, torch.tensor([0]), style)
        b = head.style_align(content, torch.tensor([1]), style)
        assert not torch.allclose(a, b)

    def test_out_of_range_category(self):
        head = DecodeHead(CFG)
        with pytest.raises(ValueError):
            head.embed_category(torch.tensor([CFG.CAT]))

    def test_distinct_embeddings_after_init(self):
        head = DecodeHead(CFG)
        init_module(head, Rng(0), prefix="h")
        emb = head.embed_category(torch.arange(CFG.CAT))
        for i in range(CFG.CAT):
            for j in range(i + 1, CFG.CAT):
                assert not torch.allclose(emb[i], emb[j])


class TestToLayout:
    def test_full_image_bbox_covers_layout(self):
        o = torch.randn(CFG.d_C, CFG.roi_size, CFG.roi_size)
        out = to_layout(o, (0, 0, 16, 16), CFG)
        assert out.shape == (CFG.d_C, CFG.feature_size, CFG.feature_size)
        assert (out.abs().sum(dim=0) > 0).all()

    def test_zero_outside_footprint(self):
        o = torch.ones(2, CFG.roi_size, CFG.roi_size)
        out = to_layout(o, (4, 8, 12, 16), CFG)  # footprint x in [1,3), y in [2,4)
        outside = out.clone()
        outside[:, 2:4, 1:3] = 0
        assert outside.abs().sum() == 0

    def test_constant_preserved(self):
        o = torch.full((2, CFG.roi_size, CFG.roi_size), 1.5)
        out = to_layout(o, (4, 8, 12, 16), CFG)
        torch.testing.assert_close(out[:, 2:4, 1:3], torch.full((2, 2, 2), 1.5))


class TestFeatureMask:
    def test_identity_and_annihilator(self):
        o = torch.randn(2, CFG.feature_size, CFG.feature_size)
        ones = np.ones((16, 16), dtype=bool)
        torch.testing.assert_close(feature_mask(o, ones, CFG), o)
        zeros = np.zeros((16, 16), dtype=bool)
        assert feature_mask(o, zeros, CFG).abs().sum() == 0

    def test_checkerboard_cells(self):
        o = torch.ones(1, CFG.feature_size, CFG.feature_size)
        mask = np.zeros((16, 16), dtype=bool)
        mask[0:4, 0:4] = True   # exactly layout cell (0, 0)
        mask[4:8, 4:8] = True   # exactly layout cell (1, 1)
        out = feature_mask(o, mask, CFG)
        assert out[0, 0, 0] == 1 and out[0, 1, 1] == 1
        assert out.sum() == 2


class TestGenerate:
    def test_output_shape_and_range(self):
        img, pmap, cfg = tiny_sample()
        model = fresh_model()
        styles = sample_style_prior(len(pmap), cfg, Rng(0).stream("p"))
        out = model.generate(img, pmap, styles)
        assert out.shape == (3, 16, 16)
        assert out.abs().max() <= 1.0

    def test_bit_identical_determinism(self):
        img, pmap, cfg = tiny_sample()
        styles = sample_style_prior(len(pmap), cfg, Rng(1).stream("p"))
        a = fresh_model().generate(img, pmap, styles)
        b = fresh_model().generate(img, pmap, styles)
        torch.testing.assert_close(a, b, atol=0, rtol=0)

    def test_style_length_mismatch(self):
        img, pmap, cfg = tiny_sample()
        styles = sample_style_prior(len(pmap) + 1, cfg, Rng(0).stream("p"))
        with pytest.raises(ValueError, match="styles length"):
            fresh_model().generate(img, pmap, styles)

    def test_style_path_is_live(self):
        img, pmap, cfg = tiny_sample()
        model = fresh_model()
        styles = sample_style_prior(len(pmap), cfg, Rng(0).stream("p"))
        styles.sample.requires_grad_(True)
        model.generate(img, pmap, styles).mean().backward()
        assert styles.sample.grad is not None
        assert styles.sample.grad.abs().sum() > 0

    def test_style_locality_pre_composition(self):
        """Changing object j's style only changes layout j before the cLSTM."""
        img, pmap, cfg = tiny_sample()
        model = fresh_model()
        content = model.encode_content(img, pmap)
        styles = sample_style_prior(len(pmap), cfg, Rng(0).stream("p"))
        base = model.masked_layouts(content, pmap, styles)
        bumped = styles.sample.clone()
        bumped[1] += 1.0
        from posagan.generator import ObjectStyleCode
        styles2 = ObjectStyleCode(styles.mu, styles.logvar, bumped, styles.xi)
        other = model.masked_layouts(content, pmap, styles2)
        torch.testing.assert_close(base[0], other[0], atol=0, rtol=0)
        assert not torch.allclose(base[1], other[1])

    def test_m_consistency(self):
        cfg = tiny_config()
        samples = generate_dataset(3, cfg)
        model = TranslationModel.fresh(cfg, Rng(0))
        for s in samples:
            img = torch.from_numpy(s.a).permute(2, 0, 1)
            m = len(s.pmap)
            content = model.encode_content(img, s.pmap)
            styles = sample_style_prior(m, cfg, Rng(0).stream("p"))
            layouts = model.masked_layouts(content, s.pmap, styles)
            assert content.shape[0] == layouts.shape[0] == m
