"""Shared domain types, configuration and deterministic RNG plumbing.

Images are H x W x 3 float32 numpy arrays in [-1, 1].  A panoptic map is an
ordered list of objects (category, bbox, full-image mask) whose masks tile
the canvas exactly; the ordering is the composition sequence used downstream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

__all__ = [
    "Config",
    "ObjectEntry",
    "PanopticMap",
    "Rng",
    "validate_panoptic_map",
    "validate_image",
    "to_unit_range",
    "from_unit_range",
    "enforce_max_objects",
]

LOSS_NAMES = ("adv", "recon_img", "kl", "recon_latent", "perceptual")


@dataclass(frozen=True)
class Config:
    """Flat run configuration.

    Defaults are the desk-scale setting (64x64 synthetic scenes); use
    :meth:`reference_scale` for the full 256x256 setting.
    """

    image_size: int = 64
    max_objects: int = 8
    CAT: int = 8            # categories incl. background; [0, thing_cats) are things
    thing_cats: int = 4
    d_C: int = 64           # content code channels
    d_S: int = 32           # encoded style dims
    d_L: int = 32           # category embedding dims
    d_Src: int = 32         # prior-sampled style dims (must equal d_S, see validate)
    roi_size: int = 4       # content code spatial side
    layout_scale: int = 4   # up-sampling factor alpha before bbox placement
    clstm_layers: int = 2   # desk-scale depth; reference setting uses 4
    clstm_hidden: int = 96  # desk-scale width; reference setting 512
    lambda_obj: float = 1.0
    lambda1: float = 0.1    # adversarial
    lambda2: float = 1.0    # image reconstruction L1
    lambda3: float = 1.0    # KL
    lambda4: float = 1.0    # object latent reconstruction L1
    lambda5: float = 1.0    # perceptual
    lr_G: float = 3e-4      # reference value 1e-4; raised for the short desk run
    lr_D: float = 2e-4      # reference value 0.005 destabilises the tiny model
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 500
    sample_every: int = 500
    disable_adv: bool = False
    disable_recon_img: bool = False
    disable_kl: bool = False
    disable_recon_latent: bool = False
    disable_perceptual: bool = False

    @classmethod
    def reference_scale(cls) -> "Config":
        return cls(
            image_size=256, max_objects=32, CAT=134, thing_cats=80,
            d_C=512, d_S=256, d_L=256, d_Src=256, roi_size=8,
            layout_scale=4, clstm_layers=4, clstm_hidden=512,
            lr_G=1e-4, lr_D=0.005, iterations=400_000,
        )

    @property
    def feature_size(self) -> int:
        """Backbone / layout grid side (two stride-2 stages below the image)."""
        return self.image_size // 4

    @property
    def stuff_cats(self) -> int:
        return self.CAT - self.thing_cats

    @property
    def background_category(self) -> int:
        return self.CAT - 1

    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def disabled(self, name: str) -> bool:
        return bool(getattr(self, f"disable_{name}"))

    def disable(self, name: str) -> "Config":
        if name not in LOSS_NAMES:
            raise ValueError(f"unknown loss name {name!r}; valid: {', '.join(LOSS_NAMES)}")
        return replace(self, **{f"disable_{name}": True})

    def validate(self) -> None:
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        if self.d_Src != self.d_S:
            raise ValueError("d_Src must equal d_S (a single style projection serves "
                             "both encoded and prior-sampled codes)")
        if not (0 < self.thing_cats < self.CAT):
            raise ValueError("thing_cats must be in (0, CAT)")
        if self.max_objects < 1 or self.roi_size < 1 or self.clstm_layers < 1:
            raise ValueError("max_objects, roi_size and clstm_layers must be >= 1")

    # --- flat key = value text format -------------------------------------

    def to_text(self) -> str:
        lines = ["# posagan configuration (key = value, '#' starts a comment)"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        kinds = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"config line {lineno}: {key} expects true/false")
                kwargs[key] = value.lower() == "true"
            elif isinstance(current, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream factory.

    Every consumer derives its own Philox stream from (seed, labels), so draw
    sequences are reproducible across runs and independent between consumers.
    """

    seed: int

    def stream(self, *labels) -> np.random.Generator:
        h = hashlib.sha256(("/".join(str(l) for l in labels)).encode()).digest()
        label_key = np.frombuffer(h[:8], dtype=np.uint64)[0]
        seed_key = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=np.array([seed_key, label_key])))


@dataclass(frozen=True)
class ObjectEntry:
    """One panoptic segment: category, tight half-open bbox and full-image mask."""

    category_id: int
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open pixel coords
    mask: np.ndarray                 # H x W bool
    is_thing: bool

    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class PanopticMap:
    objects: tuple[ObjectEntry, ...]

    def __len__(self) -> int:
        return len(self.objects)

    def categories(self) -> np.ndarray:
        return np.array([o.category_id for o in self.objects], dtype=np.int64)

    def boxes(self) -> np.ndarray:
        return np.array([o.bbox for o in self.objects], dtype=np.float64)

    def label_map(self) -> np.ndarray:
        """Per-pixel object index + 1 (0 would mean uncovered)."""
        h, w = self.objects[0].mask.shape
        lab = np.zeros((h, w), dtype=np.int32)
        for i, o in enumerate(self.objects):
            lab[o.mask] = i + 1
        return lab


def validate_panoptic_map(p: PanopticMap, cfg: Config) -> list[str]:
    """Check every map invariant; returns [] iff the map is fully valid."""
    findings: list[str] = []
    m = len(p.objects)
    if not (1 <= m <= cfg.max_objects):
        findings.append(f"object count {m} outside [1, {cfg.max_objects}]")
    if m == 0:
        return findings
    h, w = cfg.image_size, cfg.image_size
    cover = np.zeros((h, w), dtype=np.int32)
    for i, o in enumerate(p.objects):
        x0, y0, x1, y1 = o.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            findings.append(f"object {i}: bbox {o.bbox} outside canvas or degenerate")
        if o.mask.shape != (h, w):
            findings.append(f"object {i}: mask shape {o.mask.shape} != canvas {(h, w)}")
            continue
        if not o.mask.any():
            findings.append(f"object {i}: mask empty")
        else:
            ys, xs = np.nonzero(o.mask)
            if xs.min() < x0 or xs.max() >= x1 or ys.min() < y0 or ys.max() >= y1:
                findings.append(f"object {i}: mask pixels escape bbox")
        if not (0 <= o.category_id < cfg.CAT):
            findings.append(f"object {i}: category {o.category_id} outside [0, {cfg.CAT})")
        cover += o.mask.astype(np.int32)
    overlap = cover > 1
    if overlap.any():
        ys, xs = np.nonzero(overlap)
        y, x = int(ys[0]), int(xs[0])
        guilty = [i for i, o in enumerate(p.objects) if o.mask[y, x]]
        findings.append(
            f"overlap: {int(overlap.sum())} pixels covered more than once "
            f"(e.g. ({x},{y}) by objects {guilty})")
    uncovered = int((cover == 0).sum())
    if uncovered:
        findings.append(f"coverage: {uncovered} pixels uncovered")
    return findings


def validate_image(img: np.ndarray, cfg: Config) -> None:
    s = cfg.image_size
    if img.shape != (s, s, 3):
        raise ValueError(f"image shape {img.shape} != {(s, s, 3)}")
    if not np.isfinite(img).all():
        raise ValueError("image has non-finite entries")
    if img.min() < -1.0 or img.max() > 1.0:
        raise ValueError("image values outside [-1, 1]")


def to_unit_range(raw: np.ndarray, cfg: Config | None = None) -> np.ndarray:
    """Map uint8 H x W x 3 to float32 in [-1, 1] (0 -> -1, 255 -> +1)."""
    if cfg is not None and raw.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"raw shape {raw.shape} != configured size {cfg.image_size}")
    return (raw.astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def from_unit_range(img: np.ndarray, cfg: Config | None = None) -> np.ndarray:
    """Inverse of :func:`to_unit_range`; exact on round-trips of byte images."""
    if cfg is not None and img.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image shape {img.shape} != configured size {cfg.image_size}")
    return np.clip(np.round((img + 1.0) * (255.0 / 2.0)), 0, 255).astype(np.uint8)


def enforce_max_objects(p: PanopticMap, cfg: Config) -> PanopticMap:
    """Truncate to max_objects, merging dropped masks into the background entry.

    The background (largest stuff entry of the background category) is always
    kept; otherwise the largest-area objects survive.
    """
    if len(p.objects) <= cfg.max_objects:
        return p
    bg_idx = max(
        (i for i, o in enumerate(p.objects) if o.category_id == cfg.background_category),
        key=lambda i: p.objects[i].area(),
        default=None,
    )
    order = sorted(range(len(p.objects)), key=lambda i: p.objects[i].area(), reverse=True)
    keep = set(order[: cfg.max_objects])
    if bg_idx is not None and bg_idx not in keep:
        keep.discard(order[cfg.max_objects - 1])
        keep.add(bg_idx)
    merged = np.zeros_like(p.objects[0].mask)
    for i, o in enumerate(p.objects):
        if i not in keep:
            merged |= o.mask
    out = []
    for i, o in enumerate(p.objects):
        if i not in keep:
            continue
        if i == bg_idx and merged.any():
            mask = o.mask | merged
            ys, xs = np.nonzero(mask)
            bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
            o = ObjectEntry(o.category_id, bbox, mask, o.is_thing)
        out.append(o)
    return PanopticMap(tuple(out))
