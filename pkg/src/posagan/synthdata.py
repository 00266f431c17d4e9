"""Procedural paired-domain scenes with exact panoptic ground truth.

Domain A is a grayscale rendering (one intensity per category); domain B
colors every instance from a per-category palette indexed by its style seed,
so the A -> B mapping is genuinely multimodal.  Geometry is identical in both
domains and the panoptic map is derived from the same rasterisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Config, ObjectEntry, PanopticMap, Rng, enforce_max_objects

__all__ = [
    "SceneSpec", "ThingSpec", "sample_scene", "render_pair", "derive_panoptic",
    "write_dataset", "read_dataset", "generate_dataset", "DatasetError",
]

NOISE_AMP = 0.02          # deterministic per-scene noise, kept small so L1 targets are stable
THING_SHAPES = ("circle", "square", "triangle", "bar")
# grayscale intensity per category (domain A), [-1, 1]
GRAY_THING = (-0.2, 0.1, 0.4, 0.7)
GRAY_STUFF = {"sky": -0.6, "road": -0.1, "grass": 0.35, "background": 0.75}
# domain-B palettes: >= 3 distinct colors per category, indexed by style seed
PALETTES_THING = (
    ((0.9, 0.1, 0.1), (0.1, 0.2, 0.9), (0.95, 0.85, 0.1), (0.1, 0.8, 0.8)),
    ((0.8, 0.4, 0.05), (0.5, 0.1, 0.7), (0.05, 0.6, 0.2), (0.9, 0.5, 0.7)),
    ((0.95, 0.95, 0.9), (0.2, 0.2, 0.25), (0.7, 0.1, 0.3), (0.2, 0.5, 0.9)),
    ((0.6, 0.9, 0.2), (0.9, 0.2, 0.6), (0.3, 0.3, 0.9), (0.9, 0.7, 0.3)),
)
# stuff palettes are three nearby shades: stuff appearance stays mildly
# multimodal while thing palettes carry the strong multimodality the
# diversity metric relies on
PALETTES_STUFF = {
    "sky": ((0.42, 0.60, 0.92), (0.46, 0.64, 0.94), (0.50, 0.68, 0.96)),
    "road": ((0.33, 0.32, 0.32), (0.37, 0.36, 0.36), (0.41, 0.40, 0.40)),
    "grass": ((0.30, 0.62, 0.24), (0.34, 0.66, 0.26), (0.38, 0.70, 0.28)),
    "background": ((0.68, 0.66, 0.60), (0.72, 0.70, 0.64), (0.76, 0.74, 0.68)),
}
STUFF_ORDER = ("background", "sky", "grass", "road")  # back-to-front sequence order


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThingSpec:
    shape: str          # one of THING_SHAPES
    category_id: int    # in [0, thing_cats)
    center: tuple[int, int]
    size: int
    style_seed: int


@dataclass(frozen=True)
class SceneSpec:
    horizon: int                 # sky fills rows [0, horizon)
    road_top: int                # road band rows [road_top, road_bot)
    road_bot: int
    things: tuple[ThingSpec, ...]  # back-to-front draw order
    style_seed: int              # appearance seed for stuff + noise

    def stuff_category(self, name: str, cfg: Config) -> int:
        if name == "background":
            return cfg.background_category
        return cfg.thing_cats + STUFF_ORDER.index(name) - 1  # sky, grass, road


def sample_scene(rng: Rng | np.random.Generator, cfg: Config,
                 index: int = 0) -> SceneSpec:
    """Draw a deterministic scene; thing count is uniform in [1, 4]."""
    g = rng.stream("scene", index) if isinstance(rng, Rng) else rng
    s = cfg.image_size
    horizon = int(g.integers(s // 5, s // 2))
    road_top = int(g.integers(horizon + s // 8, s - s // 4))
    road_bot = int(g.integers(road_top + s // 12, s - s // 16))
    max_things = min(4, cfg.max_objects - len(STUFF_ORDER))
    n_things = int(g.integers(1, max_things + 1))
    things = []
    for _ in range(n_things):
        cat = int(g.integers(0, cfg.thing_cats))
        shape = THING_SHAPES[cat % len(THING_SHAPES)]
        lo = max(4, s // 12)
        size = int(g.integers(lo, max(s // 4, lo + 1)))
        half = size // 2 + 1
        cx = int(g.integers(half, s - half))
        cy = int(g.integers(half, s - half))
        things.append(ThingSpec(shape, cat, (cx, cy), size, int(g.integers(0, 2**31))))
    return SceneSpec(horizon, road_top, road_bot, tuple(things), int(g.integers(0, 2**31)))


def _thing_mask(t: ThingSpec, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    cx, cy = t.center
    h = t.size / 2.0
    if t.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= h * h
    if t.shape == "square":
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    if t.shape == "triangle":
        return (yy >= cy - h) & (yy <= cy + h) & (np.abs(xx - cx) <= (yy - (cy - h)) / 2.0)
    if t.shape == "bar":
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= max(1.0, h / 3.0))
    raise ValueError(f"unknown shape {t.shape!r}")


def _stuff_masks(scene: SceneSpec, s: int) -> dict[str, np.ndarray]:
    yy = np.mgrid[0:s, 0:s][0]
    return {
        "sky": yy < scene.horizon,
        "grass": (yy >= scene.horizon) & (yy < scene.road_top),
        "road": (yy >= scene.road_top) & (yy < scene.road_bot),
        "background": yy >= scene.road_bot,
    }


def _segments(scene: SceneSpec, cfg: Config):
    """Rasterise in sequence order with z-order occlusion; yields (name|thing, mask)."""
    s = cfg.image_size
    stuff = _stuff_masks(scene, s)
    occupied = np.zeros((s, s), dtype=bool)
    thing_segs: list[tuple[str | ThingSpec, np.ndarray]] = []
    for t in reversed(scene.things):  # front-most first so later things occlude earlier
        mask = _thing_mask(t, s) & ~occupied
        occupied |= mask
        thing_segs.append((t, mask))
    stuff_segs = [(name, stuff[name] & ~occupied) for name in STUFF_ORDER]
    return stuff_segs + thing_segs[::-1]  # stuff back-to-front, then things back-to-front


def derive_panoptic(scene: SceneSpec, cfg: Config) -> PanopticMap:
    """Exact ground-truth panoptic map; fully occluded objects are dropped."""
    entries = []
    for key, mask in _segments(scene, cfg):
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        if isinstance(key, ThingSpec):
            entries.append(ObjectEntry(key.category_id, bbox, mask, True))
        else:
            entries.append(ObjectEntry(scene.stuff_category(key, cfg), bbox, mask, False))
    return enforce_max_objects(PanopticMap(tuple(entries)), cfg)


def _noise(shape, seed: int) -> np.ndarray:
    g = np.random.Generator(np.random.Philox(key=np.array([np.uint64(seed), np.uint64(0)])))
    return g.uniform(-NOISE_AMP, NOISE_AMP, size=shape).astype(np.float32)


def render_pair(scene: SceneSpec, cfg: Config) -> tuple[np.ndarray, np.ndarray]:
    """Render (domain A grayscale, domain B colored) with identical geometry."""
    s = cfg.image_size
    a = np.zeros((s, s, 3), dtype=np.float32)
    b = np.zeros((s, s, 3), dtype=np.float32)
    for key, mask in _segments(scene, cfg):
        if not mask.any():
            continue
        if isinstance(key, ThingSpec):
            gray = GRAY_THING[key.category_id % len(GRAY_THING)]
            palette = PALETTES_THING[key.category_id % len(PALETTES_THING)]
            color = palette[key.style_seed % len(palette)]
        else:
            gray = GRAY_STUFF[key]
            palette = PALETTES_STUFF[key]
            color = palette[(scene.style_seed + STUFF_ORDER.index(key)) % len(palette)]
        a[mask] = gray
        b[mask] = np.array(color, dtype=np.float32) * 2.0 - 1.0
    a = a + _noise((s, s, 1), scene.style_seed ^ 0xA)
    b = b + _noise((s, s, 3), scene.style_seed ^ 0xB)
    return np.clip(a, -1, 1).astype(np.float32), np.clip(b, -1, 1).astype(np.float32)


# --- dataset persistence ---------------------------------------------------
# NNNNNN_a.png / NNNNNN_b.png : 8-bit RGB
# NNNNNN_seg.png              : 8-bit single channel, value = object index + 1
# NNNNNN_meta.json            : objects (index, category_id, bbox, is_thing) + scene seed


@dataclass(frozen=True)
class Sample:
    a: np.ndarray
    b: np.ndarray
    pmap: PanopticMap
    seed: int


def _img8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_dataset(out_dir: str | Path, samples: list[Sample]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, smp in enumerate(samples):
        stem = out / f"{i:06d}"
        Image.fromarray(_img8(smp.a), "RGB").save(f"{stem}_a.png")
        Image.fromarray(_img8(smp.b), "RGB").save(f"{stem}_b.png")
        Image.fromarray(smp.pmap.label_map().astype(np.uint8), "L").save(f"{stem}_seg.png")
        meta = {
            "seed": smp.seed,
            "objects": [
                {"index": j, "category_id": o.category_id,
                 "bbox": list(o.bbox), "is_thing": o.is_thing}
                for j, o in enumerate(smp.pmap.objects)
            ],
        }
        with open(f"{stem}_meta.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)


def read_dataset(dir_path: str | Path) -> list[Sample]:
    d = Path(dir_path)
    stems = sorted(p.name[:-len("_meta.json")] for p in d.glob("*_meta.json"))
    if not stems:
        raise DatasetError(f"no dataset samples found in {d}")
    samples = []
    for stem in stems:
        try:
            a8 = np.asarray(Image.open(d / f"{stem}_a.png").convert("RGB"))
            b8 = np.asarray(Image.open(d / f"{stem}_b.png").convert("RGB"))
            seg = np.asarray(Image.open(d / f"{stem}_seg.png").convert("L"))
            with open(d / f"{stem}_meta.json") as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"sample {stem}: unreadable or corrupt ({e})") from e
        objects = []
        for rec in meta["objects"]:
            mask = seg == rec["index"] + 1
            objects.append(ObjectEntry(
                rec["category_id"], tuple(rec["bbox"]), mask, rec["is_thing"]))
        a = (a8.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
        b = (b8.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
        samples.append(Sample(a, b, PanopticMap(tuple(objects)), meta["seed"]))
    return samples


def generate_dataset(n: int, cfg: Config, seed: int | None = None) -> list[Sample]:
    rng = Rng(seed if seed is not None else cfg.seed)
    samples = []
    for i in range(n):
        scene = sample_scene(rng, cfg, index=i)
        a, b = render_pair(scene, cfg)
        # snap to the 8-bit grid so dataset write/read round-trips are bit-exact
        a = (_img8(a).astype(np.float32) / 127.5 - 1.0).astype(np.float32)
        b = (_img8(b).astype(np.float32) / 127.5 - 1.0).astype(np.float32)
        samples.append(Sample(a, b, derive_panoptic(scene, cfg), scene.style_seed))
    return samples
