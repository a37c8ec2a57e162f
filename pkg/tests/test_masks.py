"""Mask utilities against brute-force coordinate-scan oracles."""
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dragedit.errors import MaskError
from dragedit.masks import (MaskResolutionWarning, RegionMasks, as_binary_mask,
                            bounding_box, default_gate_margin, downsample_mask,
                            make_gate_mask, mask_from_image, translate_mask,
                            translate_tensor)


# ---------------------------------------------------------------- oracles

def bbox_by_scanning(mask):
    """Walk every pixel; track min/max. (y0, y1, x0, x1), half-open."""
    ys, xs = [], []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if mask[y, x] > 0:
                ys.append(y)
                xs.append(x)
    return min(ys), max(ys) + 1, min(xs), max(xs) + 1


def pool_by_loops(mask, target):
    """Area-average pooling with explicit loops, then threshold at 0.5."""
    h = mask.shape[0]
    f = h // target
    out = np.zeros((target, target), dtype=np.float32)
    for by in range(target):
        for bx in range(target):
            block = mask[by * f:(by + 1) * f, bx * f:(bx + 1) * f]
            out[by, bx] = 1.0 if float(np.mean(block)) >= 0.5 else 0.0
    return out


def translate_by_loops(x, dx, dy, fill=0.0):
    h, w = x.shape
    out = np.full((h, w), fill, dtype=np.float32)
    for y in range(h):
        for xx in range(w):
            sy, sx = y - dy, xx - dx
            if 0 <= sy < h and 0 <= sx < w:
                out[y, xx] = x[sy, sx]
    return out


def random_mask(g, size, p=0.3):
    return (torch.rand(size, size, generator=g) < p).float()


# ------------------------------------------------------------------ tests

def test_as_binary_mask_accepts_zeros_and_ones():
    m = as_binary_mask(np.array([[0, 1], [1, 0]]))
    assert m.dtype == torch.float32
    assert set(m.flatten().tolist()) <= {0.0, 1.0}


def test_as_binary_mask_rejects_gray_values():
    with pytest.raises(MaskError):
        as_binary_mask(np.array([[0.5, 0.0], [1.0, 0.0]]))


def test_as_binary_mask_rejects_3d():
    with pytest.raises(MaskError):
        as_binary_mask(np.zeros((2, 2, 2)))


def test_mask_from_image_threshold():
    img = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    m = mask_from_image(img)
    assert m.tolist() == [[0.0, 0.0, 1.0, 1.0]]


def test_bounding_box_matches_scan():
    g = torch.Generator().manual_seed(11)
    for _ in range(50):
        m = random_mask(g, 16)
        if m.sum() == 0:
            continue
        assert bounding_box(m) == bbox_by_scanning(m.numpy())


def test_bounding_box_empty_raises():
    with pytest.raises(MaskError):
        bounding_box(torch.zeros(8, 8))


def test_translate_matches_loop_oracle():
    g = torch.Generator().manual_seed(12)
    for dx, dy in [(0, 0), (3, 0), (0, -2), (-5, 4), (15, 15), (-16, 0)]:
        x = torch.rand(16, 16, generator=g)
        want = translate_by_loops(x.numpy(), dx, dy)
        got = translate_tensor(x, dx, dy)
        assert np.allclose(got.numpy(), want)


def test_translate_mask_stays_binary():
    m = torch.zeros(8, 8)
    m[2:4, 2:4] = 1.0
    out = translate_mask(m, 3, 1)
    assert set(out.flatten().tolist()) <= {0.0, 1.0}
    assert bounding_box(out) == (3, 5, 5, 7)


def test_translate_tensor_trailing_dims():
    x = torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(2, 4, 4)
    out = translate_tensor(x, 1, 0)
    for c in range(2):
        assert np.allclose(out[c].numpy(), translate_by_loops(x[c].numpy(), 1, 0))


def test_downsample_matches_pool_oracle():
    g = torch.Generator().manual_seed(13)
    for target in (16, 8):
        for _ in range(20):
            m = random_mask(g, 32, p=0.4)
            want = pool_by_loops(m.numpy(), target)
            got = downsample_mask(m, target)
            assert np.array_equal(got.numpy(), want)


def test_downsample_warns_when_support_vanishes():
    m = torch.zeros(32, 32)
    m[0, 0] = 1.0  # one pixel: 1/16 of a 4x4 block, rounds away at 8x8
    with pytest.warns(MaskResolutionWarning):
        out = downsample_mask(m, 8)
    assert out.sum() == 0


def test_downsample_rejects_non_divisible():
    with pytest.raises(MaskError):
        downsample_mask(torch.zeros(32, 32), 7)


def test_gate_mask_is_padded_bbox_rectangle():
    m = torch.zeros(32, 32)
    m[10:14, 20:25] = 1.0
    q = make_gate_mask(m, margin=2)
    y0, y1, x0, x1 = bounding_box(q)
    assert (y0, y1, x0, x1) == (8, 16, 18, 27)
    # rectangle is solid
    assert q[y0:y1, x0:x1].min() == 1.0
    assert q.sum() == (y1 - y0) * (x1 - x0)


def test_gate_mask_clamps_at_canvas_edge():
    m = torch.zeros(16, 16)
    m[0:2, 14:16] = 1.0
    q = make_gate_mask(m, margin=5)
    assert q.shape == (16, 16)
    assert bounding_box(q) == (0, 7, 9, 16)


def test_default_gate_margin_scales_with_bbox_diagonal():
    m = torch.zeros(32, 32)
    m[4:10, 4:10] = 1.0  # 6x6 box, diagonal ~8.49, 10% -> ceil = 1
    assert default_gate_margin(m) == 1
    m2 = torch.zeros(64, 64)
    m2[0:40, 0:30] = 1.0  # diagonal 50, 10% -> 5
    assert default_gate_margin(m2) == 5


@given(dx=st.integers(-6, 6), dy=st.integers(-6, 6))
@settings(max_examples=40, deadline=None)
def test_gate_covers_target_mask(dx, dy):
    m_v = torch.zeros(32, 32)
    m_v[12:18, 12:18] = 1.0
    rm = RegionMasks.build(m_v, dx, dy)
    # Q must contain every m_c pixel
    assert float((rm.m_c * (1.0 - rm.q)).sum()) == 0.0


def test_region_masks_pyramid_resolutions():
    m_v = torch.zeros(32, 32)
    m_v[8:16, 8:16] = 1.0
    rm = RegionMasks.build(m_v, 4, 0)
    for res in (16, 8):
        level = rm.at(res)
        assert level["m_v"].shape == (res, res)
        assert level["m_c"].shape == (res, res)


def test_region_masks_m_c_is_translated_m_v():
    m_v = torch.zeros(32, 32)
    m_v[8:16, 8:16] = 1.0
    rm = RegionMasks.build(m_v, 5, -3)
    assert torch.equal(rm.m_c, translate_mask(m_v, 5, -3))


def test_region_masks_rejects_empty_source():
    with pytest.raises(MaskError):
        RegionMasks.build(torch.zeros(32, 32), 2, 2)


def test_region_masks_rejects_fully_offcanvas_target():
    m_v = torch.zeros(32, 32)
    m_v[0:4, 0:4] = 1.0
    with pytest.raises(MaskError):
        RegionMasks.build(m_v, 32, 0)


def test_region_masks_quiet_when_support_survives():
    m_v = torch.zeros(32, 32)
    m_v[8:16, 8:16] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", MaskResolutionWarning)
        RegionMasks.build(m_v, 4, 0)
