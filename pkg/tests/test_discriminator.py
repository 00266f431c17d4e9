"""Discriminator heads: shapes, object scoring, locality, gradients."""

import math

import numpy as np
import pytest
import torch

from posagan.core import Rng
from posagan.discriminator import Discriminator, DiscriminatorOutput, object_score
from posagan.nnblocks import finite_difference_grad

from conftest import map_from_labels, tiny_config, two_object_map


CFG = tiny_config()


def fresh_disc(seed: int = 0) -> Discriminator:
    return Discriminator.fresh(CFG, Rng(seed))


class TestDiscriminate:
    def test_shape_contract(self):
        img = torch.randn(3, 16, 16) * 0.3
        pmap = two_object_map()
        out = fresh_disc().discriminate(img, pmap)
        assert out.s_img.shape == ()
        assert out.s_real.shape == (len(pmap),)
        assert out.s_cls.shape == (len(pmap), CFG.CAT)

    def test_deterministic(self):
        img = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
        pmap = two_object_map()
        a = fresh_disc().discriminate(img, pmap)
        b = fresh_disc().discriminate(img, pmap)
        torch.testing.assert_close(a.s_img, b.s_img, atol=0, rtol=0)
        torch.testing.assert_close(a.s_cls, b.s_cls, atol=0, rtol=0)

    def test_zero_init_heads_score_zero(self):
        img = torch.randn(3, 16, 16)
        out = fresh_disc().discriminate(img, two_object_map())
        assert float(out.s_img.detach()) == 0.0
        assert float(out.s_real.detach().abs().sum()) == 0.0

    def test_batched_matches_single(self):
        d = fresh_disc()
        imgs = torch.randn(2, 3, 16, 16) * 0.5
        pmap = two_object_map()
        boxes4 = torch.from_numpy(pmap.boxes()).float()
        boxes5 = torch.cat([
            torch.cat([torch.zeros(len(pmap), 1), boxes4], dim=1),
            torch.cat([torch.ones(len(pmap), 1), boxes4], dim=1)])
        si, sr, sc = d(imgs, boxes5)
        si0, sr0, sc0 = d(imgs[0], boxes4)
        torch.testing.assert_close(si[0], si0)
        torch.testing.assert_close(sr[:len(pmap)], sr0)
        torch.testing.assert_close(sc[:len(pmap)], sc0)

    def test_local_change_leaves_distant_object_unchanged(self):
        """The backbone's receptive field is ~47 pixels, so on a 128x128
        canvas a perturbation confined to the top-left corner cannot reach an
        object crop in the bottom-right corner."""
        cfg = tiny_config(image_size=128)
        d = Discriminator.fresh(cfg, Rng(0))
        with torch.no_grad():  # make the realness head non-trivial
            d.real_head.weight.fill_(0.01)
        img = torch.randn(3, 128, 128, generator=torch.Generator().manual_seed(1)) * 0.3
        bumped = img.clone()
        bumped[:, 0:2, 0:2] += 0.5
        far_box = torch.tensor([[112.0, 112.0, 128.0, 128.0]])
        _, sr_a, sc_a = d(img, far_box)
        _, sr_b, sc_b = d(bumped, far_box)
        torch.testing.assert_close(sr_a, sr_b, atol=0, rtol=0)
        torch.testing.assert_close(sc_a, sc_b, atol=0, rtol=0)
        # a perturbation inside the object's bbox does change its scores
        inside = img.clone()
        inside[:, 120:122, 120:122] += 0.5
        _, sr_c, sc_c = d(inside, far_box)
        assert not torch.equal(sc_a, sc_c)

    def test_gradient_matches_fd(self):
        torch.manual_seed(0)
        d = Discriminator.fresh(CFG, Rng(3)).double()
        pmap = two_object_map()
        boxes = torch.from_numpy(pmap.boxes()).double()
        img = torch.randn(3, 16, 16, dtype=torch.float64) * 0.3

        def fn(x):
            si, sr, sc = d(x, boxes)
            return si + sr.sum() + 0.1 * sc.sum()

        x = img.clone().requires_grad_(True)
        fn(x).backward()
        fd = finite_difference_grad(fn, img)
        err = float((x.grad - fd).norm() / (fd.norm() + 1e-12))
        assert err < 1e-4


class TestObjectScore:
    def test_uniform_logits_spot_value(self):
        out = DiscriminatorOutput(torch.tensor(0.0, dtype=torch.float64),
                                  torch.zeros(1, dtype=torch.float64),
                                  torch.zeros(1, 8, dtype=torch.float64))
        s = object_score(out, torch.tensor([3]))
        assert float(s) == pytest.approx(math.log(1 / 8), abs=1e-9)

    def test_perfect_classifier_limit(self):
        vals = []
        for margin in (2.0, 5.0, 20.0):
            logits = torch.full((1, 8), -margin, dtype=torch.float64)
            logits[0, 2] = margin
            out = DiscriminatorOutput(torch.tensor(0.0, dtype=torch.float64),
                                      torch.zeros(1, dtype=torch.float64), logits)
            vals.append(float(object_score(out, torch.tensor([2]))))
        assert all(v <= 0 for v in vals)
        assert vals[0] < vals[1] <= vals[2]  # approaches 0 from below
        assert vals[0] < -1e-3 and vals[-1] > -1e-9

    def test_permutation_invariance(self):
        g = torch.Generator().manual_seed(0)
        s_real = torch.randn(5, generator=g)
        s_cls = torch.randn(5, 8, generator=g)
        cats = torch.tensor([0, 3, 1, 7, 2])
        out = DiscriminatorOutput(torch.tensor(0.0), s_real, s_cls)
        base = object_score(out, cats)
        perm = torch.randperm(5, generator=g)
        out_p = DiscriminatorOutput(torch.tensor(0.0), s_real[perm], s_cls[perm])
        torch.testing.assert_close(object_score(out_p, cats[perm]), base)

    def test_length_mismatch(self):
        out = DiscriminatorOutput(torch.tensor(0.0), torch.zeros(2), torch.zeros(2, 8))
        with pytest.raises(ValueError):
            object_score(out, torch.tensor([1]))
