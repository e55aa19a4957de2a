"""Input checks shared by the estimator front end."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)


def check_bev(y, n_classes: int | None = None, shape: tuple | None = None,
              name: str = "bev") -> np.ndarray:
    """Boolean ``(N, K, H, W)`` BEV maps (a single ``(K, H, W)`` map is promoted)."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ValueError(f"{name} must have shape (N, K, H, W), got {y.shape}")
    if y.dtype != bool:
        if not np.isin(y, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        y = y.astype(bool)
    if n_classes is not None and y.shape[1] != n_classes:
        raise ValueError(f"{name} has {y.shape[1]} channels, expected {n_classes}")
    if shape is not None and tuple(y.shape[-2:]) != tuple(shape):
        raise ValueError(f"{name} maps are {y.shape[-2:]}, expected {tuple(shape)}")
    return y


def check_soft(p, n_classes: int | None = None, name: str = "pred") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 3:
        p = p[None]
    if p.ndim != 4:
        raise ValueError(f"{name} must have shape (N, K, H, W), got {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError(f"{name} contains non-finite values")
    if n_classes is not None and p.shape[1] != n_classes:
        raise ValueError(f"{name} has {p.shape[1]} channels, expected {n_classes}")
    return p


def check_images(x, height: int | None = None, width: int | None = None) -> np.ndarray:
    """uint8 ``(N, 3, H, W)`` images; channel-last and float [0, 1] input accepted."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"images must be 4-D, got shape {x.shape}")
    if x.shape[1] != 3 and x.shape[-1] == 3:
        x = x.transpose(0, 3, 1, 2)
    if x.shape[1] != 3:
        raise ValueError(f"images must have 3 channels, got shape {x.shape}")
    if x.dtype != np.uint8:
        x = x.astype(np.float64)
        if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
            raise ValueError("float images must lie in [0, 1]")
        x = np.round(x * 255).astype(np.uint8)
    if height is not None and width is not None and x.shape[2:] != (height, width):
        raise ValueError(f"images are {x.shape[2:]}, expected {(height, width)}")
    return np.ascontiguousarray(x)


def check_mask(v, n: int, shape, name: str = "visibility") -> np.ndarray:
    v = np.asarray(v, dtype=bool)
    if v.ndim == 2:
        v = np.broadcast_to(v, (n,) + v.shape)
    if v.shape != (n,) + tuple(shape):
        raise ValueError(f"{name} must have shape {(n,) + tuple(shape)}, got {v.shape}")
    return v


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
