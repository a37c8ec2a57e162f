// Inline SVG sparkline for per-step job metrics. Pure string construction so
// it can be unit-tested without a DOM.

export function sparklinePath(points: number[], width: number, height: number, pad = 2): string {
  if (points.length === 0) return "";
  const lo = Math.min(...points);
  const hi = Math.max(...points);
  const span = hi - lo || 1;
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  const step = points.length > 1 ? innerW / (points.length - 1) : 0;
  const coords = points.map((v, i) => {
    const x = pad + i * step;
    const y = pad + innerH * (1 - (v - lo) / span);
    return `${x.toFixed(2)},${y.toFixed(2)}`;
  });
  return "M" + coords.join(" L");
}

export function sparklineSvg(label: string, points: number[], width = 160, height = 36): string {
  const path = sparklinePath(points, width, height);
  const last = points.length > 0 ? points[points.length - 1].toPrecision(3) : "–";
  return (
    `<svg viewBox="0 0 ${width} ${height}" width="${width}" height="${height}" role="img">` +
    `<title>${label}: ${last}</title>` +
    `<path d="${path}" fill="none" stroke="currentColor" stroke-width="1.5"/>` +
    `</svg>`
  );
}
