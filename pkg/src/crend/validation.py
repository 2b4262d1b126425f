"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .volume import LabelMask, Volume


def check_volume(x, spacing=None, name: str = "X") -> Volume:
    """Coerce an array or :class:`Volume` into a finite 3D float32 volume."""
    if isinstance(x, Volume):
        return x if spacing is None else Volume(x.data, spacing)
    arr = np.asarray(x)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name}: expected a numeric array, got dtype {arr.dtype}")
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected a 3D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or infinite values")
    return Volume(arr.astype(np.float32), spacing or (1.0, 1.0, 1.0))


def check_volumes(X, name: str = "X") -> list[Volume]:
    if isinstance(X, (Volume, np.ndarray)) and np.ndim(getattr(X, "data", X)) == 3:
        X = [X]
    vols = [check_volume(x, name=f"{name}[{i}]") for i, x in enumerate(X)]
    if not vols:
        raise ValueError(f"{name}: no volumes given")
    return vols


def check_label_mask(y, shape=None, name: str = "y") -> LabelMask:
    """Accept a :class:`LabelMask` or a label map with values in {0, 1, 2}."""
    if isinstance(y, LabelMask):
        mask = y
    else:
        arr = np.asarray(y)
        if arr.ndim != 3:
            raise ValueError(f"{name}: expected a 3D label map, got shape {arr.shape}")
        bad = np.setdiff1d(np.unique(arr), [0, 1, 2])
        if bad.size:
            raise ValueError(f"{name}: label values must be 0, 1 or 2, found {bad.tolist()}")
        mask = LabelMask.from_label_map(arr)
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"{name}: shape {mask.shape} does not match volume shape {tuple(shape)}")
    return mask


def check_label_masks(y, volumes: Sequence[Volume], name: str = "y") -> list[LabelMask]:
    if isinstance(y, LabelMask) or (isinstance(y, np.ndarray) and y.ndim == 3):
        y = [y]
    y = list(y)
    if len(y) != len(volumes):
        raise ValueError(f"{name}: {len(y)} masks for {len(volumes)} volumes")
    return [check_label_mask(m, v.shape, f"{name}[{i}]") for i, (m, v) in enumerate(zip(y, volumes))]


def check_patch_size(patch_size, divisor: int = 16) -> tuple[int, int, int]:
    patch = tuple(int(p) for p in patch_size)
    if len(patch) != 3:
        raise ValueError(f"patch_size: expected three values, got {patch_size}")
    for axis, p in enumerate(patch):
        if p < divisor or p % divisor:
            raise ValueError(f"patch_size: axis {axis} is {p}, must be a positive multiple of {divisor}")
    return patch
