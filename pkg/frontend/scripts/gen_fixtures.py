#!/usr/bin/env python3
"""Regenerate the contract fixtures the frontend tests pin against.

Everything here is derived from the Python package, which is the source of
truth for the HTTP contract: the published EditSpec schema, the server-side
mask translation (M_c = translate(M_v, dx, dy) after the >127 binarization),
and a rendered toy scene used by the end-to-end test.

Run from anywhere:  python3 frontend/scripts/gen_fixtures.py
"""
import json
from pathlib import Path

import numpy as np
from PIL import Image

from dragedit.masks import mask_from_image, translate_mask
from dragedit.pipeline import EDIT_SPEC_SCHEMA
from dragedit.toydata import Scene, render_scene, shape_mask

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def write_schema() -> None:
    out = FIXTURES / "edit-spec.schema.json"
    out.write_text(json.dumps(EDIT_SPEC_SCHEMA, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


def write_translate_cases() -> None:
    """10 mask-translation cases with server-computed expected outputs.

    Inputs are grayscale rasters (0..255) exactly as the brush tool would
    export them; expected outputs are the binary {0,1} M_c the server derives.
    Cases cover zero drag, clipping off every edge, full off-canvas shifts,
    and non-binary gray values around the >127 threshold.
    """
    rng = np.random.default_rng(414)
    cases = []

    def add(mask: np.ndarray, dx: int, dy: int) -> None:
        m_c = translate_mask(mask_from_image(mask), dx, dy)
        cases.append({
            "width": int(mask.shape[1]),
            "height": int(mask.shape[0]),
            "dx": dx,
            "dy": dy,
            "mask": [int(v) for v in mask.flatten()],
            "expected": [int(v) for v in m_c.numpy().flatten()],
        })

    # a brushed blob, dragged in each diagonal direction
    blob = np.zeros((16, 16), dtype=np.uint8)
    blob[4:9, 3:10] = 255
    blob[9:12, 5:8] = 255
    for dx, dy in [(3, 2), (-3, 2), (3, -2), (-5, -4)]:
        add(blob, dx, dy)

    # zero drag must be the identity on the binarized mask
    add(blob, 0, 0)

    # clip off the right and bottom edges
    edge = np.zeros((12, 12), dtype=np.uint8)
    edge[8:12, 9:12] = 255
    add(edge, 5, 0)
    add(edge, 0, 7)

    # shift everything fully off canvas -> all zeros
    add(edge, 12, 0)

    # gray values straddling the >127 threshold
    gray = np.zeros((10, 10), dtype=np.uint8)
    gray[2:6, 2:6] = 127   # below threshold: dropped
    gray[5:9, 5:9] = 128   # above threshold: kept
    add(gray, 1, 1)

    # random speckle at the server's native resolution
    speckle = (rng.random((32, 32)) > 0.8).astype(np.uint8) * 255
    add(speckle, -2, 6)

    assert len(cases) == 10
    out = FIXTURES / "mask-translate-cases.json"
    out.write_text(json.dumps(cases) + "\n")
    print(f"wrote {out} ({len(cases)} cases)")


def write_scene() -> None:
    """A rendered toy scene + its geometry, for the end-to-end test."""
    scene = Scene(shape="circle", color="blue", size="big", cx=11, cy=19, radius=7)
    img = render_scene(scene)
    arr = ((img.permute(1, 2, 0).numpy() + 1.0) * 127.5).round().clip(0, 255)
    Image.fromarray(arr.astype(np.uint8)).save(FIXTURES / "scene.png")
    mask = shape_mask(scene)
    ys, xs = np.nonzero(mask)
    meta = {
        "caption": scene.caption,
        "cx": scene.cx, "cy": scene.cy, "radius": scene.radius,
        "bbox": [int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())],
        "resolution": 32,
    }
    (FIXTURES / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote scene.png + scene.json (bbox {meta['bbox']})")


if __name__ == "__main__":
    FIXTURES.mkdir(exist_ok=True)
    write_schema()
    write_translate_cases()
    write_scene()
