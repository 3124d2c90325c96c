"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .data import Sample
from .errors import ContractError
from .tensor_ops import Tensor4


def check_images(X) -> list[Tensor4]:
    """Coerce estimator input into a list of (1,3,H,W) [0,1] image tensors.

    Accepts an (n,3,H,W) or (n,H,W,3) float array, a list of per-image arrays
    in either layout, or a list of Sample/Tensor4 values.
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ContractError(f"image array must be 4-D, got shape {X.shape}")
        items = [X[i] for i in range(X.shape[0])]
    elif isinstance(X, (list, tuple)):
        items = list(X)
    else:
        raise ContractError(f"unsupported input type {type(X).__name__}")
    if not items:
        raise ContractError("empty image input")

    out: list[Tensor4] = []
    for i, item in enumerate(items):
        if isinstance(item, Sample):
            out.append(item.image)
            continue
        if isinstance(item, Tensor4):
            arr = item.values
            if arr.shape[0] != 1 or arr.shape[1] != 3:
                raise ContractError(f"image {i} tensor must be (1,3,H,W), got {arr.shape}")
            out.append(item)
            continue
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[-1] == 3:
            arr = arr.transpose(2, 0, 1)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ContractError(
                f"image {i} must be (3,H,W) or (H,W,3), got shape {arr.shape}"
            )
        if arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
            raise ContractError(
                f"image {i} values outside [0,1]: range [{arr.min()}, {arr.max()}]"
            )
        out.append(Tensor4(np.clip(arr, 0.0, 1.0)[None]))
    return out


def check_labels_01(y, n: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n,):
        raise ContractError(f"labels must have shape ({n},), got {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError("labels must be 0 (normal) or 1 (anomalous)")
    return arr.astype(np.int64)


def check_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise ContractError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
