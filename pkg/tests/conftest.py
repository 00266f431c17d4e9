"""Shared fixtures and map-building helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from posagan.core import Config, ObjectEntry, PanopticMap

torch.set_num_threads(1)


def tiny_config(**overrides) -> Config:
    """A 16x16 configuration small enough for finite-difference checks."""
    base = dict(
        image_size=16, max_objects=6, CAT=8, thing_cats=4,
        d_C=8, d_S=4, d_L=4, d_Src=4, roi_size=2, layout_scale=4,
        clstm_layers=1, clstm_hidden=4, batch_size=2,
        iterations=3, checkpoint_every=2, sample_every=2,
    )
    base.update(overrides)
    return Config(**base)


@pytest.fixture
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture
def desk_cfg() -> Config:
    return Config()


def map_from_labels(labels: np.ndarray, categories: dict[int, int],
                    thing_cats: int = 4) -> PanopticMap:
    """Build a valid PanopticMap from an integer label grid.

    ``labels`` assigns each pixel a segment id; ``categories`` maps segment id
    to category.  Masks are disjoint and cover the canvas by construction.
    """
    entries = []
    for seg_id in sorted(categories):
        mask = labels == seg_id
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        cat = categories[seg_id]
        entries.append(ObjectEntry(cat, bbox, mask, cat < thing_cats))
    return PanopticMap(tuple(entries))


def random_map(rng: np.random.Generator, size: int = 16, n_segments: int = 4,
               n_cats: int = 4, thing_cats: int = 2) -> PanopticMap:
    """Random Voronoi-style segmentation with random categories."""
    n_segments = max(1, n_segments)
    cy = rng.integers(0, size, size=n_segments)
    cx = rng.integers(0, size, size=n_segments)
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    labels = np.argmin(d, axis=0)
    cats = {i: int(rng.integers(0, n_cats)) for i in range(n_segments)}
    return map_from_labels(labels, cats, thing_cats=thing_cats)


def two_object_map(size: int = 16, split: int = 8, cat_top: int = 0,
                   cat_bottom: int = 7) -> PanopticMap:
    """A thing strip over a background strip; the simplest valid map."""
    labels = np.zeros((size, size), dtype=np.int64)
    labels[split:] = 1
    return map_from_labels(labels, {0: cat_top, 1: cat_bottom})
