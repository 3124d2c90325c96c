"""Self-supervised anomaly synthesis.

Two complementary corruption routes train the discriminator without any real
defect labels: image-space texture blending under a Perlin-noise mask (the
local branch) and feature-space perturbations steered by discriminator
gradients (the global branch), plus the controlled-contamination helper for
robustness experiments. Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .rng import derived_rng
from .tensor_ops import Tensor4

__all__ = [
    "PerlinMask",
    "GasConfig",
    "AnomalyBatch",
    "perlin",
    "las_corrupt",
    "gas_perturb",
    "contaminate",
]


@dataclass(frozen=True)
class PerlinMask:
    """Fractal gradient noise normalized to [0,1] plus its thresholded form."""

    grid: Tensor4      # (1,1,h,w) in [0,1]
    binary: Tensor4    # (1,1,h,w) in {0,1}
    seed: int
    octaves: int
    threshold: float


@dataclass(frozen=True)
class GasConfig:
    """Feature-space perturbation parameters.

    The truncation band defaults to (0.5, 2.0) x sigma*sqrt(d), resolved
    against the embedding width d at call time when bounds are left unset.
    """

    sigma: float = 0.015
    ascent_steps: int = 1
    ascent_lr: float = 0.01
    r_min: float | None = None
    r_max: float | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.ascent_steps < 0:
            raise ContractError(f"ascent_steps must be non-negative, got {self.ascent_steps}")
        if self.ascent_lr <= 0:
            raise ContractError(f"ascent_lr must be positive, got {self.ascent_lr}")

    def resolve_band(self, dim: int) -> tuple[float, float]:
        r_min = self.r_min if self.r_min is not None else 0.5 * self.sigma * math.sqrt(dim)
        r_max = self.r_max if self.r_max is not None else 2.0 * self.sigma * math.sqrt(dim)
        if not 0 < r_min <= r_max:
            raise ContractError(f"need 0 < r_min <= r_max, got ({r_min}, {r_max})")
        return r_min, r_max


@dataclass(frozen=True)
class AnomalyBatch:
    """One training triplet: clean embeddings, perturbed embeddings, corrupted image.

    Position labels: the normal branch is all 0, the global branch all 1, and
    the local branch carries the mask binarized at the embedding grid.
    """

    normal: Tensor4
    gas: Tensor4
    las_image: Tensor4
    las_mask: Tensor4
    labels_normal: Tensor4
    labels_gas: Tensor4
    labels_las: Tensor4


def _lattice_noise(h: int, w: int, cells_y: int, cells_x: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Single-octave gradient-lattice noise over an h x w pixel grid.

    The lattice carries a random sub-cell offset: corner zeros would
    otherwise pin to fixed pixel rows/columns across every mask, making the
    noise ensemble non-stationary.
    """
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells_y + 2, cells_x + 2))
    gy, gx = np.sin(angles), np.cos(angles)
    off_y, off_x = rng.uniform(0.0, 1.0, size=2)

    ys = (np.arange(h) + 0.5) / h * cells_y + off_y
    xs = (np.arange(w) + 0.5) / w * cells_x + off_x
    iy = np.minimum(ys.astype(np.int64), cells_y)
    ix = np.minimum(xs.astype(np.int64), cells_x)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        # dot product of the corner gradient with the offset to the pixel
        return (gx[np.ix_(iy + dy, ix + dx)] * (fx - dx)
                + gy[np.ix_(iy + dy, ix + dx)] * (fy - dy))

    def fade(t: np.ndarray) -> np.ndarray:
        return t * t * t * (t * (t * 6 - 15) + 10)

    uy, ux = fade(fy), fade(fx)
    top = corner(0, 0) + ux * (corner(0, 1) - corner(0, 0))
    bot = corner(1, 0) + ux * (corner(1, 1) - corner(1, 0))
    return top + uy * (bot - top)


def perlin(h: int, w: int, octaves: int, seed: int, threshold: float) -> PerlinMask:
    """Fractal Perlin noise, min-max normalized, thresholded into a defect mask."""
    if h < 8 or w < 8:
        raise ContractError(f"mask extents must be at least 8, got ({h},{w})")
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie strictly in (0,1), got {threshold}")
    if octaves < 1:
        raise ContractError(f"octaves must be positive, got {octaves}")
    total = np.zeros((h, w))
    amplitude = 1.0
    for octave in range(octaves):
        cells = 4 * (2 ** octave)
        rng = derived_rng(seed, "perlin", octave)
        total += amplitude * _lattice_noise(h, w, cells, cells, rng)
        amplitude *= 0.5
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        norm = np.zeros_like(total)
    else:
        norm = (total - lo) / (hi - lo)
    binary = (norm > threshold).astype(np.float64)
    return PerlinMask(grid=Tensor4(norm[None, None]),
                      binary=Tensor4(binary[None, None]),
                      seed=seed, octaves=octaves, threshold=threshold)


def las_corrupt(image: Tensor4, texture: Tensor4, mask: PerlinMask,
                beta: float) -> tuple[Tensor4, Tensor4]:
    """Blend texture into the image under the binary mask.

    out = image outside the mask (bit-exact), beta*image + (1-beta)*texture
    inside it. Returns (corrupted image, mask map).
    """
    if image.shape != texture.shape:
        raise ContractError(
            f"image and texture shapes differ: {image.shape} vs {texture.shape}"
        )
    mh, mw = mask.binary.h, mask.binary.w
    if (mh, mw) != (image.h, image.w):
        raise ContractError(
            f"mask extents ({mh},{mw}) do not match image {image.shape}"
        )
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0,1], got {beta}")
    m = mask.binary.values.astype(bool)  # (1,1,h,w), broadcasts over n and c
    blended = beta * image.values + (1.0 - beta) * texture.values
    out = np.where(m, blended, image.values)
    return Tensor4._wrap(out), Tensor4(mask.binary.values.copy())


def gas_perturb(normal: Tensor4, cfg: GasConfig, grad_fn, seed: int) -> Tensor4:
    """Perturb embeddings toward the discriminator's decision boundary.

    Starts from seeded N(0, sigma^2) noise, takes ascent_steps steps along the
    per-position unit-normalized gradient of the anomaly objective, then
    projects every position's perturbation vector into the [r_min, r_max]
    L2-norm band (nearest bound).
    """
    r_min, r_max = cfg.resolve_band(normal.c)
    rng = derived_rng(seed, "gas")
    delta = rng.normal(0.0, cfg.sigma, size=normal.shape)
    for _ in range(cfg.ascent_steps):
        grad = grad_fn(Tensor4._wrap(normal.values + delta))
        g = grad.values if isinstance(grad, Tensor4) else np.asarray(grad, dtype=np.float64)
        if g.shape != normal.shape:
            raise ContractError(
                f"grad_fn returned shape {g.shape}, expected {normal.shape}"
            )
        norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
        unit = np.where(norms > 0, g / np.maximum(norms, 1e-300), 0.0)
        delta = delta + cfg.ascent_lr * unit

    norms = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
    # degenerate zero vectors get a deterministic direction so the floor applies
    dead = norms < 1e-12
    if np.any(dead):
        bump = np.zeros_like(delta)
        bump[:, 0:1] = 1.0
        delta = np.where(dead, bump, delta)
        norms = np.where(dead, 1.0, norms)
    factor = np.clip(norms, r_min, r_max) / norms
    return Tensor4._wrap(normal.values + delta * factor)


def contaminate(train_set: list, pool: list, rate: float, seed: int) -> list:
    """Inject defective samples (relabeled normal) so they form `rate` of the result.

    k = ceil(rate * n / (1 - rate)) samples are drawn from the pool without
    replacement; the originals are untouched and injected copies are appended.
    """
    if not 0.0 <= rate <= 0.3:
        raise ContractError(f"contamination rate must be in [0, 0.3], got {rate}")
    if rate == 0.0:
        return list(train_set)
    n = len(train_set)
    k = math.ceil(rate * n / (1.0 - rate))
    if len(pool) < k:
        raise ContractError(
            f"contamination needs {k} defective samples but the pool has {len(pool)}"
        )
    rng = derived_rng(seed, "contaminate")
    picks = rng.choice(len(pool), size=k, replace=False)
    injected = [replace(pool[int(i)], label="normal", mask=None) for i in picks]
    return list(train_set) + injected
