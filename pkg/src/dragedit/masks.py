"""Binary region masks: source/target object masks, the rectangular gate mask,
and resolution pyramids matched to the attention/feature capture layers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch

from .errors import MaskError


class MaskResolutionWarning(UserWarning):
    """A mask downsampled to a needed resolution came out all-zero."""


ArrayLike = Union[torch.Tensor, np.ndarray]


def as_binary_mask(mask: ArrayLike) -> torch.Tensor:
    """Coerce to a float32 {0, 1} [H, W] tensor; reject anything non-binary."""
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    if mask.ndim != 2:
        raise MaskError(f"mask must be 2-D [H, W], got shape {tuple(mask.shape)}")
    mask = mask.float()
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise MaskError("mask must be binary (values 0 or 1)")
    return mask


def mask_from_image(pixels: ArrayLike) -> torch.Tensor:
    """Single-channel image -> binary mask with the value > 127 convention."""
    if isinstance(pixels, torch.Tensor):
        pixels = pixels.numpy()
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        if pixels.shape[2] not in (1, 2, 3, 4):
            raise MaskError(f"cannot interpret image shape {pixels.shape} as a mask")
        pixels = pixels[..., 0]
    return as_binary_mask((pixels > 127).astype(np.float32))


def translate_tensor(x: torch.Tensor, dx: int, dy: int, fill: float = 0.0) -> torch.Tensor:
    """Integer translation of the trailing [H, W] axes; vacated area <- fill."""
    h, w = x.shape[-2], x.shape[-1]
    out = torch.full_like(x, fill)
    sy0, sy1 = max(0, -dy), min(h, h - dy)
    sx0, sx1 = max(0, -dx), min(w, w - dx)
    if sy1 > sy0 and sx1 > sx0:
        out[..., sy0 + dy:sy1 + dy, sx0 + dx:sx1 + dx] = x[..., sy0:sy1, sx0:sx1]
    return out


def translate_mask(mask: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    return translate_tensor(as_binary_mask(mask), dx, dy, fill=0.0)


def bounding_box(mask: torch.Tensor) -> Tuple[int, int, int, int]:
    """(y0, y1, x0, x1), half-open, of the mask support; errors when empty."""
    ys, xs = torch.nonzero(as_binary_mask(mask), as_tuple=True)
    if ys.numel() == 0:
        raise MaskError("mask has no support")
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def make_gate_mask(m_c: torch.Tensor, margin: int) -> torch.Tensor:
    """Axis-aligned rectangle: bounding box of m_c grown by ``margin`` pixels."""
    m_c = as_binary_mask(m_c)
    if margin < 0:
        raise MaskError("margin must be >= 0")
    y0, y1, x0, x1 = bounding_box(m_c)
    h, w = m_c.shape
    q = torch.zeros_like(m_c)
    q[max(0, y0 - margin):min(h, y1 + margin),
      max(0, x0 - margin):min(w, x1 + margin)] = 1.0
    return q


def default_gate_margin(m_v: torch.Tensor) -> int:
    """10% of the object bounding-box diagonal, rounded up."""
    y0, y1, x0, x1 = bounding_box(m_v)
    diag = float(np.hypot(y1 - y0, x1 - x0))
    return int(np.ceil(0.1 * diag))


def downsample_mask(mask: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Area-average pooling then threshold (mean >= 0.5 -> 1).

    Warns with MaskResolutionWarning when the result is all-zero.
    """
    mask = as_binary_mask(mask)
    h, w = mask.shape
    if h != w:
        raise MaskError(f"expected a square mask, got {h}x{w}")
    if target_resolution <= 0 or h % target_resolution != 0:
        raise MaskError(f"target resolution {target_resolution} does not divide {h}")
    k = h // target_resolution
    pooled = mask.reshape(target_resolution, k, target_resolution, k).mean(dim=(1, 3))
    out = (pooled >= 0.5).float()
    if out.sum() == 0 and mask.sum() > 0:
        warnings.warn(
            f"mask support vanished at {target_resolution}x{target_resolution}",
            MaskResolutionWarning)
    return out


@dataclass
class RegionMasks:
    """The three native-resolution region masks plus per-resolution copies.

    m_c is m_v translated by the drag offset and clipped to the canvas; q is
    the rectangular gate containing m_c. ``pyramid[res][name]`` holds the
    threshold-downsampled copy of each mask.
    """
    m_v: torch.Tensor
    m_c: torch.Tensor
    q: torch.Tensor
    pyramid: Dict[int, Dict[str, torch.Tensor]] = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @classmethod
    def build(cls, m_v: ArrayLike, dx: int, dy: int,
              resolutions: Iterable[int] = (16, 8),
              q_margin: Optional[int] = None) -> "RegionMasks":
        m_v = as_binary_mask(m_v)
        if m_v.sum() == 0:
            raise MaskError("source object mask is empty")
        m_c = translate_mask(m_v, dx, dy)
        if m_c.sum() == 0:
            raise MaskError("drag displaces the object mask fully off canvas")
        if q_margin is None:
            q_margin = default_gate_margin(m_v)
        q = make_gate_mask(m_c, q_margin)
        obj = cls(m_v=m_v, m_c=m_c, q=q)
        for res in resolutions:
            level = {}
            for name, m in (("m_v", m_v), ("m_c", m_c), ("q", q)):
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", MaskResolutionWarning)
                    level[name] = downsample_mask(m, res)
                for c in caught:
                    obj.notes.append(f"{name}: {c.message}")
            obj.pyramid[res] = level
        return obj

    def at(self, resolution: int) -> Dict[str, torch.Tensor]:
        if resolution not in self.pyramid:
            raise MaskError(f"no mask pyramid level at resolution {resolution}")
        return self.pyramid[resolution]
