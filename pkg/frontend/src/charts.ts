// Small dependency-free line charts. The point layout is a pure function
// so tests can check it without a canvas backend.

export interface XY {
  x: number;
  y: number;
}

export type PixelPoint = [number, number];

/**
 * Map a series into canvas pixel coordinates. x maps left-to-right over
 * the data range, y top-to-bottom inverted (larger value = higher on
 * screen). Degenerate ranges (single point, flat series) center instead
 * of dividing by zero.
 */
export function chartPoints(
  series: XY[],
  width: number,
  height: number,
  pad = 4,
): PixelPoint[] {
  if (!series.length) return [];
  const xs = series.map((p) => p.x);
  const ys = series.map((p) => p.y);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  return series.map((p) => {
    const fx = xMax > xMin ? (p.x - xMin) / (xMax - xMin) : 0.5;
    const fy = yMax > yMin ? (p.y - yMin) / (yMax - yMin) : 0.5;
    return [pad + fx * innerW, pad + (1 - fy) * innerH];
  });
}

export function drawChart(
  canvas: HTMLCanvasElement,
  series: XY[],
  label: string,
  color = '#4db6ff',
): void {
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = '#888';
  ctx.font = '10px sans-serif';
  const latest = series.length ? series[series.length - 1].y : null;
  ctx.fillText(latest === null ? label : `${label}: ${latest.toPrecision(4)}`, 4, 10);
  const pts = chartPoints(series, canvas.width, canvas.height - 12, 4);
  if (!pts.length) return;
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  pts.forEach(([x, y], i) => {
    if (i === 0) ctx.moveTo(x, y + 12);
    else ctx.lineTo(x, y + 12);
  });
  ctx.stroke();
}
