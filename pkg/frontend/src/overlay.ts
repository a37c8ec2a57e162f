// Geometry for drawing an attention map over the image canvas. The map is a
// lower-resolution grid (e.g. 16x16 over a 32x32 image); to line up with the
// image it must cover the canvas exactly, and every attention texel must
// cover a whole block of image pixels — same grid, coarser cells.

export interface Rect {
  left: number;
  top: number;
  width: number;
  height: number;
}

/** The overlay's CSS box: exactly the canvas box, never offset or inset. */
export function overlayRect(canvas: Rect): Rect {
  return { left: canvas.left, top: canvas.top, width: canvas.width, height: canvas.height };
}

/**
 * CSS box of one attention texel (row, col) on a canvas showing the full
 * image. attRes is the attention grid size, e.g. 16.
 */
export function texelRect(canvas: Rect, attRes: number, row: number, col: number): Rect {
  const w = canvas.width / attRes;
  const h = canvas.height / attRes;
  return { left: canvas.left + col * w, top: canvas.top + row * h, width: w, height: h };
}

/** Which attention texel an image pixel falls in (same grid, coarser cells). */
export function pixelToTexel(
  imageRes: number,
  attRes: number,
  x: number,
  y: number,
): { row: number; col: number } {
  const scale = attRes / imageRes;
  return { row: Math.floor(y * scale), col: Math.floor(x * scale) };
}

/** CSS box of one image pixel on the canvas. */
export function pixelRect(canvas: Rect, imageRes: number, x: number, y: number): Rect {
  const s = canvas.width / imageRes;
  const sv = canvas.height / imageRes;
  return { left: canvas.left + x * s, top: canvas.top + y * sv, width: s, height: sv };
}

/** Map a client (mouse) position to image-pixel coordinates on the canvas. */
export function clientToPixel(
  canvas: Rect,
  imageRes: number,
  clientX: number,
  clientY: number,
): { x: number; y: number } {
  return {
    x: ((clientX - canvas.left) / canvas.width) * imageRes,
    y: ((clientY - canvas.top) / canvas.height) * imageRes,
  };
}
