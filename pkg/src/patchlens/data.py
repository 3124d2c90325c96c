"""Dataset loading, preprocessing, augmentation and the synthetic generator.

Datasets follow the industrial-benchmark directory layout
``root/category/{train/good, test/<defect|good>, ground_truth/<defect>}``.
The synthetic generator manufactures textured "parts" with seeded defects
(scratches, holes, occlusions) plus exact masks, so the whole pipeline runs
at desk scale without any external data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError
from .imagefiles import SUPPORTED_SUFFIXES, read_image, read_mask
from .rng import derived_rng, mix64
from .synthesis import perlin
from .tensor_ops import Tensor4, bilinear_resize

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class Sample:
    """One image with its label and (for defective test samples) a pixel mask."""

    image: Tensor4                 # (1,3,H,W) in [0,1]
    label: str                     # "normal" | "anomalous"
    mask: Tensor4 | None = None    # (1,1,H,W) in {0,1}
    source: str = ""
    category: str = ""

    def __post_init__(self):
        if self.label not in ("normal", "anomalous"):
            raise ContractError(f"unknown label {self.label!r}")
        if self.image.n != 1 or self.image.c != 3:
            raise ContractError(f"sample image must be (1,3,H,W), got {self.image.shape}")
        v = self.image.values
        if v.size and (v.min() < -1e-9 or v.max() > 1 + 1e-9):
            raise ContractError(f"sample image values outside [0,1] ({self.source})")
        if self.mask is not None:
            if self.label != "anomalous":
                raise ContractError("a mask implies an anomalous label")
            m = self.mask
            if m.shape != (1, 1, self.image.h, self.image.w):
                raise ContractError(
                    f"mask shape {m.shape} does not match image {self.image.shape}"
                )
            mv = m.values
            if not np.all((mv == 0.0) | (mv == 1.0)):
                raise ContractError("mask values must be exactly 0 or 1")


@dataclass(frozen=True)
class AugmentConfig:
    """Transform families, each gated independently with apply_prob."""

    rotation: bool = True
    rotation_degrees: float = 15.0
    translation: bool = True
    translation_frac: float = 0.10
    color_jitter: bool = True
    jitter_delta: float = 0.2
    hflip: bool = True
    vflip: bool = True
    apply_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ContractError(f"apply_prob must be in [0,1], got {self.apply_prob}")
        for name in ("rotation_degrees", "translation_frac", "jitter_delta"):
            if not math.isfinite(getattr(self, name)):
                raise ContractError(f"{name} must be finite")


def preprocess(s: Sample, size: int, stats=(IMAGENET_MEAN, IMAGENET_STD)) -> Tensor4:
    """Resize to (size, size) and normalize per channel: (x - mean) / std."""
    if size % 32 or size <= 0:
        raise ContractError(f"target size must be a positive multiple of 32, got {size}")
    mean, std = (np.asarray(v, dtype=np.float64) for v in stats)
    if np.any(std == 0):
        raise ContractError("normalization std must be nonzero")
    x = bilinear_resize(s.image, size, size)
    out = (x.values - mean[None, :, None, None]) / std[None, :, None, None]
    return Tensor4._wrap(out)


def _affine_channelwise(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray,
                        order: int, mode: str) -> np.ndarray:
    out = np.empty_like(arr)
    for c in range(arr.shape[1]):
        out[0, c] = ndimage.affine_transform(
            arr[0, c], matrix, offset=offset, order=order, mode=mode, cval=0.0)
    return out


def augment(s: Sample, cfg: AugmentConfig, index: int) -> Sample:
    """Apply the enabled transforms, each with probability apply_prob.

    Masks undergo the identical geometric transforms with nearest-neighbor
    sampling; deterministic per (cfg.seed, index).
    """
    rng = derived_rng(cfg.seed, "augment", index)
    img = s.image.values.copy()
    msk = s.mask.values.copy() if s.mask is not None else None
    h, w = s.image.h, s.image.w

    angle = 0.0
    shift_y = shift_x = 0.0
    if cfg.rotation and rng.uniform() < cfg.apply_prob:
        angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    if cfg.translation and rng.uniform() < cfg.apply_prob:
        shift_y = rng.uniform(-cfg.translation_frac, cfg.translation_frac) * h
        shift_x = rng.uniform(-cfg.translation_frac, cfg.translation_frac) * w
    if angle != 0.0 or shift_y != 0.0 or shift_x != 0.0:
        theta = math.radians(angle)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        # inverse map: output -> input, rotation about the center then shift
        offset = center - rot @ (center + np.array([shift_y, shift_x]))
        img = _affine_channelwise(img, rot, offset, order=1, mode="nearest")
        if msk is not None:
            msk = _affine_channelwise(msk, rot, offset, order=0, mode="constant")

    if cfg.hflip and rng.uniform() < cfg.apply_prob:
        img = img[:, :, :, ::-1]
        if msk is not None:
            msk = msk[:, :, :, ::-1]
    if cfg.vflip and rng.uniform() < cfg.apply_prob:
        img = img[:, :, ::-1, :]
        if msk is not None:
            msk = msk[:, :, ::-1, :]

    if cfg.color_jitter and rng.uniform() < cfg.apply_prob:
        d = cfg.jitter_delta
        brightness = rng.uniform(-d, d)
        contrast = 1.0 + rng.uniform(-d, d)
        saturation = 1.0 + rng.uniform(-d, d)
        gray = img.mean(axis=1, keepdims=True)
        img = gray + saturation * (img - gray)
        img = img.mean() + contrast * (img - img.mean()) + brightness

    img = np.clip(img, 0.0, 1.0)
    mask_t = Tensor4(np.ascontiguousarray(msk)) if msk is not None else None
    return Sample(image=Tensor4(np.ascontiguousarray(img)), label=s.label,
                  mask=mask_t, source=s.source, category=s.category)


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES)


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    if not gt_dir.is_dir():
        return None
    for suffix in SUPPORTED_SUFFIXES:
        for candidate in (gt_dir / f"{stem}_mask{suffix}", gt_dir / f"{stem}{suffix}"):
            if candidate.is_file():
                return candidate
    return None


def _load_sample(img_path: Path, label: str, mask_path: Path | None,
                 category: str) -> Sample:
    rgb = read_image(img_path)
    image = Tensor4(rgb.transpose(2, 0, 1)[None])
    mask = None
    if mask_path is not None:
        m = read_mask(mask_path)
        if m.shape != rgb.shape[:2]:
            raise FormatError(
                f"mask {mask_path} has size {m.shape}, image {img_path} has "
                f"size {rgb.shape[:2]}"
            )
        mask = Tensor4(m[None, None])
    return Sample(image=image, label=label, mask=mask,
                  source=str(img_path), category=category)


def stratified_split(samples: list[Sample], fraction: float,
                     seed: int) -> tuple[list[Sample], list[Sample]]:
    """Split into (held_out, rest), taking `fraction` of each label class."""
    held: list[Sample] = []
    rest: list[Sample] = []
    for label in ("normal", "anomalous"):
        group = [s for s in samples if s.label == label]
        k = int(round(fraction * len(group)))
        order = derived_rng(seed, "val-split", label).permutation(len(group))
        chosen = set(order[:k].tolist())
        for i, s in enumerate(group):
            (held if i in chosen else rest).append(s)
    return held, rest


def load_dataset(root: str | Path, category: str, val_fraction: float = 0.3,
                 seed: int = 0) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Load (train, val, test) from the benchmark directory layout.

    Train may contain only good samples; the validation split is carved from
    the test set by a seeded stratified split. Ordering is lexicographic in
    the file paths, independent of filesystem enumeration order.
    """
    base = Path(root) / category
    train_good = base / "train" / "good"
    test_dir = base / "test"
    if not train_good.is_dir():
        raise FormatError(f"missing train/good directory: {train_good}")
    if not test_dir.is_dir():
        raise FormatError(f"missing test directory: {test_dir}")
    bad_subdirs = sorted(d.name for d in (base / "train").iterdir()
                         if d.is_dir() and d.name != "good")
    if bad_subdirs:
        raise FormatError(
            f"train must be defect-free; found subdirectories {bad_subdirs} "
            f"under {base / 'train'}"
        )

    train = [_load_sample(p, "normal", None, category) for p in _list_images(train_good)]

    test_all: list[Sample] = []
    for sub in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        if sub.name == "good":
            test_all.extend(_load_sample(p, "normal", None, category)
                            for p in _list_images(sub))
        else:
            gt_dir = Path(root) / category / "ground_truth" / sub.name
            for p in _list_images(sub):
                test_all.append(_load_sample(p, "anomalous",
                                             _find_mask(gt_dir, p.stem), category))
    val, test = stratified_split(test_all, val_fraction, seed)
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset
# ---------------------------------------------------------------------------

def procedural_texture(h: int, w: int, seed: int) -> Tensor4:
    """A seeded texture in [0,1] used for blend corruption.

    Ranges cover colored fractal noise through near-solid dark/bright fills so
    the corruption branch sees the kinds of appearance real defects have.
    """
    rng = derived_rng(seed, "texture-color")
    base = rng.uniform(0.05, 0.95, size=3)
    if rng.uniform() < 0.4:
        base[:] = base.mean()  # grayscale solids: holes, metal scratches
    amplitude = rng.uniform(0.05, 0.6)
    noise = perlin(max(h, 8), max(w, 8), octaves=4, seed=mix64(seed, "texture"),
                   threshold=0.5).grid.values[0, 0][:h, :w]
    chans = [np.clip(base[c] + amplitude * (noise - 0.5) * rng.uniform(0.5, 1.5), 0, 1)
             for c in range(3)]
    return Tensor4(np.stack(chans)[None])


def make_texture_provider(seed: int):
    """index -> (h, w) -> texture tensor; independent streams per index."""
    def provider(index: int, h: int, w: int) -> Tensor4:
        return procedural_texture(h, w, mix64(seed, "las-texture", index))
    return provider


def _base_part(size: int, rng: np.random.Generator) -> np.ndarray:
    """A full-frame brushed-texture surface, (3,size,size).

    Texture categories (no dominant structural edges) keep the desk-scale
    task well posed for a randomly initialized extractor: corruption is the
    only strong edge source in a normal image.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    shading = perlin(size, size, octaves=3, seed=int(rng.integers(1 << 62)),
                     threshold=0.5).grid.values[0, 0]
    grain = rng.normal(0.0, 0.012, size=(size, size))
    # directional brushing: low-frequency stripes with per-sample phase
    phase = rng.uniform(0.0, 2.0 * np.pi)
    stripes = 0.03 * np.sin(2.0 * np.pi * xx / size * 9.0 + phase
                            + 2.5 * (shading - 0.5))
    base = np.array([0.58, 0.55, 0.48])
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = base[c] + 0.14 * (shading - 0.5) + stripes + grain
    return np.clip(img, 0.0, 1.0)


def _paint_scratch(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[1]
    p0 = rng.uniform(0.22 * size, 0.78 * size, size=2)
    direction = rng.uniform(-1, 1, size=2)
    direction /= max(np.hypot(*direction), 1e-9)
    length = rng.uniform(0.25, 0.5) * size
    p1 = np.clip(p0 + direction * length, 0.1 * size, 0.9 * size)
    thickness = rng.uniform(1.8, 4.0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = p1 - p0
    seg_len2 = max(float(d @ d), 1e-9)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / seg_len2, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    hit = dist <= thickness
    shade = rng.choice([0.08, 0.95])
    img[:, hit] = 0.25 * img[:, hit] + 0.75 * shade
    mask[hit] = 1.0


def _paint_hole(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[1]
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    ry = rng.uniform(0.07, 0.13) * size
    rx = rng.uniform(0.07, 0.13) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    hit = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[:, hit] = rng.uniform(0.02, 0.12)
    mask[hit] = 1.0


def _paint_blob(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[1]
    patch = procedural_texture(size, size, int(rng.integers(1 << 62))).values[0]
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    r = rng.uniform(0.09, 0.16) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    img[:, hit] = patch[:, hit]
    mask[hit] = 1.0


_DEFECT_PAINTERS = (_paint_scratch, _paint_hole, _paint_blob)


def _synth_sample(seed: int, index: int, size: int, anomalous: bool,
                  category: str) -> Sample:
    rng = derived_rng(seed, "synth", index)
    img = _base_part(size, rng)
    mask = np.zeros((size, size))
    if anomalous:
        n_defects = int(rng.integers(1, 3))
        for _ in range(n_defects):
            painter = _DEFECT_PAINTERS[int(rng.integers(len(_DEFECT_PAINTERS)))]
            painter(img, mask, rng)
        img = np.clip(img, 0.0, 1.0)
    return Sample(image=Tensor4(img[None]),
                  label="anomalous" if anomalous else "normal",
                  mask=Tensor4(mask[None, None]) if anomalous else None,
                  source=f"synth:{seed}:{index}", category=category)


def synth_dataset(seed: int, n_train: int, n_test: int, defect_rate: float,
                  size: int, n_val: int | None = None,
                  category: str = "synthetic"):
    """Seeded synthetic (train, val, test) with exact defect masks.

    Train is defect-free; test and val carry `defect_rate` anomalous samples.
    Bit-identical for identical arguments.
    """
    if n_train <= 0 or n_test <= 0:
        raise ContractError("sample counts must be positive")
    if size % 32 or size <= 0:
        raise ContractError(f"size must be a positive multiple of 32, got {size}")
    if not 0.0 <= defect_rate <= 1.0:
        raise ContractError(f"defect_rate must be in [0,1], got {defect_rate}")
    if n_val is None:
        n_val = max(8, n_test // 3)

    train = [_synth_sample(seed, i, size, False, category) for i in range(n_train)]

    def split(count: int, tag: str, base_index: int) -> list[Sample]:
        k_anom = int(round(defect_rate * count))
        flags = np.zeros(count, dtype=bool)
        flags[:k_anom] = True
        flags = flags[derived_rng(seed, "synth-order", tag).permutation(count)]
        return [_synth_sample(seed, base_index + i, size, bool(flags[i]), category)
                for i in range(count)]

    val = split(n_val, "val", n_train)
    test = split(n_test, "test", n_train + n_val)
    return train, val, test
