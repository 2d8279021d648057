"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Iterable

import numpy as np
import torch

from .volume_io import SegMask3D, Volume3D


class NotFittedError(ValueError, AttributeError):
    pass


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() or load a checkpoint first"
        )


def check_volumes(X, ndim: int = 5, name: str = "X") -> np.ndarray:
    """Coerce volumes to a finite float array of shape ``(N, C, D, H, W)``.

    Accepts a :class:`Volume3D`, a sequence of them, or an array with 4 dims
    (one volume) or 5 dims (a batch).
    """
    if isinstance(X, Volume3D):
        X = X.data[None]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], Volume3D):
        X = np.stack([v.data for v in X])
    elif isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    if X.ndim == ndim - 1:
        X = X[None]
    if X.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dims (N, C, D, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_masks(M, name: str = "masks") -> np.ndarray:
    """Coerce masks to an integer array of shape ``(N, D, H, W)``."""
    if isinstance(M, SegMask3D):
        M = M.labels[None]
    elif isinstance(M, (list, tuple)) and M and isinstance(M[0], SegMask3D):
        M = np.stack([m.labels for m in M])
    elif isinstance(M, torch.Tensor):
        M = M.detach().cpu().numpy()
    M = np.asarray(M)
    if M.ndim == 3:
        M = M[None]
    if M.ndim != 4:
        raise ValueError(f"{name} must have 4 dims (N, D, H, W), got shape {M.shape}")
    if not np.issubdtype(M.dtype, np.integer):
        if not np.all(np.equal(np.mod(M, 1), 0)):
            raise ValueError(f"{name} must contain integer labels")
        M = M.astype(np.int64)
    if M.size and M.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    return M


def check_divisible(spatial: Iterable[int], factor: int) -> None:
    for axis, n in zip(("depth", "height", "width"), spatial):
        if n % factor:
            raise ValueError(f"{axis} size {n} is not divisible by the downsampling factor {factor}")


def as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
