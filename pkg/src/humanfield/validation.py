"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .synthcap import Dataset, FramePair, load_dataset


def check_image(image, size: int | None = None) -> np.ndarray:
    """Float64 (H, W, 3) image with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if size is not None and arr.shape[:2] != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} does not match image {tuple(shape)}")
    if arr.dtype != bool and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask must be binary")
    return arr.astype(bool)


def check_dataset(data, split: str | None = None) -> Dataset:
    """A loaded dataset, from a :class:`Dataset` or a directory path."""
    if isinstance(data, (str, Path)):
        data = load_dataset(data)
    if not isinstance(data, Dataset):
        raise TypeError(f"expected a Dataset or a dataset directory, got {type(data).__name__}")
    if split is not None and not data.subject_ids(split):
        raise ValueError(f"dataset has no {split} subjects")
    return data


def check_pairs(pairs, size: int | None = None) -> list[FramePair]:
    if isinstance(pairs, FramePair):
        pairs = [pairs]
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no frame pairs given")
    for pair in pairs:
        if not isinstance(pair, FramePair):
            raise TypeError(f"expected FramePair items, got {type(pair).__name__}")
        check_image(pair.source.image, size)
        check_mask(pair.source.mask, pair.source.image.shape[:2])
    return pairs
