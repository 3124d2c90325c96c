"""PatchMaker and feature adaptor.

Turns the two backbone feature maps into one patch-embedding grid: each level
is mean-aggregated over a local neighborhood at its native resolution, both
are interpolated onto a common grid, concatenated channel-wise (level 2
first), and optionally projected by a trainable bias-free linear adaptor
realized as a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePair
from .errors import ContractError
from .tensor_ops import ConvSpec, Tensor4, bilinear_resize, concat_channels, conv2d, pool2d

COMMON_GRIDS = ("level3_res", "level2_res")


@dataclass(frozen=True)
class EmbeddingConfig:
    """patch_size must be odd; common_grid picks which level's resolution wins."""

    patch_size: int = 3
    common_grid: str = "level3_res"
    adaptor: bool = True

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ContractError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.common_grid not in COMMON_GRIDS:
            raise ContractError(f"common_grid must be one of {COMMON_GRIDS}")


def neighborhood_aggregate(f: Tensor4, patch_size: int) -> Tensor4:
    """Per-position mean over a patch_size x patch_size neighborhood.

    Stride 1, zero padding (patch_size-1)/2, padding excluded from the
    divisor; shape is preserved. patch_size=1 is the identity.
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise ContractError(f"patch_size must be odd and positive, got {patch_size}")
    if patch_size == 1:
        return f
    return pool2d(f, "avg", k=patch_size, stride=1, padding=(patch_size - 1) // 2)


def identity_adaptor(dim: int) -> np.ndarray:
    """The do-nothing projection matrix (training starts from here)."""
    return np.eye(dim)


def apply_adaptor(grid: Tensor4, adaptor_weights: np.ndarray) -> Tensor4:
    """Project every patch vector by a (d_out, d_in) matrix (1x1 conv, no bias)."""
    w = np.asarray(adaptor_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != grid.c:
        raise ContractError(
            f"adaptor matrix shape {w.shape} does not match {grid.c} embedding channels"
        )
    spec = ConvSpec(w.shape[0], w.shape[1], 1, 1, stride=1, padding=0,
                    weights=w.reshape(w.shape[0], w.shape[1], 1, 1))
    return conv2d(grid, spec)


def embed_pre(f: FeaturePair, cfg: EmbeddingConfig) -> Tensor4:
    """Aggregate, interpolate to the common grid and concatenate (no adaptor)."""
    a2 = neighborhood_aggregate(f.f2, cfg.patch_size)
    a3 = neighborhood_aggregate(f.f3, cfg.patch_size)
    if cfg.common_grid == "level3_res":
        gh, gw = f.f3.h, f.f3.w
    else:
        gh, gw = f.f2.h, f.f2.w
    a2 = bilinear_resize(a2, gh, gw)
    a3 = bilinear_resize(a3, gh, gw)
    return concat_channels(a2, a3)


def embed(f: FeaturePair, cfg: EmbeddingConfig,
          adaptor_weights: np.ndarray | None = None) -> Tensor4:
    """Full patch-embedding grid (n, c2+c3, G, G).

    adaptor_weights must be supplied exactly when cfg.adaptor is set.
    """
    if cfg.adaptor and adaptor_weights is None:
        raise ContractError("config enables the adaptor but no weights were supplied")
    if not cfg.adaptor and adaptor_weights is not None:
        raise ContractError("adaptor weights supplied but config disables the adaptor")
    grid = embed_pre(f, cfg)
    if cfg.adaptor:
        grid = apply_adaptor(grid, adaptor_weights)
    return grid
