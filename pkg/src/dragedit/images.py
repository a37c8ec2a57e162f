"""Image file I/O: model tensors are float32 [3, H, W] in [-1, 1]."""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from .errors import MaskError
from .masks import as_binary_mask, mask_from_image


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] uint8 (clamped)."""
    arr = image.detach().clamp(-1, 1).permute(1, 2, 0).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """[H, W, 3] uint8 -> [3, H, W] float32 in [-1, 1]."""
    t = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return t.permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path: Union[str, Path]) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path: Union[str, Path]) -> torch.Tensor:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 3 and arr.shape[0] in (1, 3):
            return torch.from_numpy(arr.astype(np.float32))
        return from_uint8(arr)
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_mask(mask: torch.Tensor, path: Union[str, Path]) -> None:
    arr = (as_binary_mask(mask).numpy() * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path: Union[str, Path]) -> torch.Tensor:
    path = Path(path)
    if path.suffix == ".npy":
        return as_binary_mask(np.load(path))
    with Image.open(path) as im:
        return mask_from_image(np.asarray(im.convert("L")))
