// Object-mask raster edited by the brush tool. The raster lives at the
// model's native resolution (one byte per pixel, 0 or 255) and is exported
// as a grayscale PNG, so what the server decodes is exactly what was
// painted — no resampling between client and server.

import { encodeGrayPng } from "./png.js";

export interface MaskRaster {
  width: number;
  height: number;
  data: Uint8Array; // 0 | 255, row-major
}

export function createMask(width: number, height: number): MaskRaster {
  return { width, height, data: new Uint8Array(width * height) };
}

export function clearMask(mask: MaskRaster): void {
  mask.data.fill(0);
}

/** Stamp a filled disc; value 255 paints, 0 erases. */
export function brushStamp(mask: MaskRaster, cx: number, cy: number, radius: number, value: 0 | 255): void {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(mask.width - 1, Math.ceil(cx + radius));
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(mask.height - 1, Math.ceil(cy + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x + 0.5 - cx;
      const dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r2) {
        mask.data[y * mask.width + x] = value;
      }
    }
  }
}

/** Stamp along the segment from (x0,y0) to (x1,y1) so fast strokes stay solid. */
export function brushLine(
  mask: MaskRaster,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  radius: number,
  value: 0 | 255,
): void {
  const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0) / Math.max(0.5, radius * 0.5)));
  for (let i = 0; i <= steps; i++) {
    const f = i / steps;
    brushStamp(mask, x0 + (x1 - x0) * f, y0 + (y1 - y0) * f, radius, value);
  }
}

export function countPainted(mask: MaskRaster): number {
  let n = 0;
  for (let i = 0; i < mask.data.length; i++) {
    if (mask.data[i] > 127) n++;
  }
  return n;
}

/** Server binarization rule: value > 127 is inside the mask. */
export function binarize(mask: MaskRaster): Uint8Array {
  const out = new Uint8Array(mask.data.length);
  for (let i = 0; i < mask.data.length; i++) {
    out[i] = mask.data[i] > 127 ? 1 : 0;
  }
  return out;
}

/**
 * Integer translation with zero fill — the target-mask derivation
 * M_c = translate(M_v, dx, dy). Must agree with the server bit for bit:
 * binarize first (>127), shift, vacated area becomes 0, anything pushed
 * past an edge is clipped.
 */
export function translateMask(mask: MaskRaster, dx: number, dy: number): Uint8Array {
  const { width: w, height: h } = mask;
  const src = binarize(mask);
  const out = new Uint8Array(w * h);
  const sy0 = Math.max(0, -dy);
  const sy1 = Math.min(h, h - dy);
  const sx0 = Math.max(0, -dx);
  const sx1 = Math.min(w, w - dx);
  for (let y = sy0; y < sy1; y++) {
    for (let x = sx0; x < sx1; x++) {
      out[(y + dy) * w + (x + dx)] = src[y * w + x];
    }
  }
  return out;
}

/** Export the raster exactly as painted, as grayscale PNG bytes. */
export function maskToPng(mask: MaskRaster): Uint8Array {
  return encodeGrayPng(mask.width, mask.height, mask.data);
}

/** Rasterize a closed lasso polygon (even-odd rule) into a fresh mask. */
export function lassoToMask(
  width: number,
  height: number,
  points: Array<{ x: number; y: number }>,
): MaskRaster {
  const mask = createMask(width, height);
  if (points.length < 3) return mask;
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const px = x + 0.5;
      const py = y + 0.5;
      let inside = false;
      for (let i = 0, j = points.length - 1; i < points.length; j = i++) {
        const a = points[i];
        const b = points[j];
        if (a.y > py !== b.y > py && px < ((b.x - a.x) * (py - a.y)) / (b.y - a.y) + a.x) {
          inside = !inside;
        }
      }
      if (inside) mask.data[y * width + x] = 255;
    }
  }
  return mask;
}

/** Centroid of painted pixels, or null for an empty mask. */
export function maskCentroid(mask: MaskRaster): { x: number; y: number } | null {
  let sx = 0;
  let sy = 0;
  let n = 0;
  for (let y = 0; y < mask.height; y++) {
    for (let x = 0; x < mask.width; x++) {
      if (mask.data[y * mask.width + x] > 127) {
        sx += x;
        sy += y;
        n++;
      }
    }
  }
  return n === 0 ? null : { x: sx / n, y: sy / n };
}
