// Deformation-grid overlay: a regular lattice advected by the streamed
// field slice. Points are in pixel (col, row) coordinates of the plane;
// the caller scales them to canvas size when drawing.

import { Plane } from './protocol.js';

export type Point = [number, number];
export type Polyline = Point[];

export interface GridLines {
  horizontal: Polyline[];
  vertical: Polyline[];
}

function at(p: Plane, r: number, c: number): number {
  return p.values[r * p.cols + c];
}

/**
 * Build grid polylines from the two in-plane displacement channels.
 * rowDisp moves a point along the row (y) direction, colDisp along the
 * column (x) direction. A zero field yields straight lines spaced
 * `spacing` pixels apart.
 */
export function gridPolylines(rowDisp: Plane, colDisp: Plane, spacing = 2): GridLines {
  if (rowDisp.rows !== colDisp.rows || rowDisp.cols !== colDisp.cols) {
    throw new Error('displacement planes disagree on shape');
  }
  if (spacing < 1) throw new Error('spacing must be >= 1');
  const { rows, cols } = rowDisp;
  const horizontal: Polyline[] = [];
  for (let r = 0; r < rows; r += spacing) {
    const line: Polyline = [];
    for (let c = 0; c < cols; c++) {
      line.push([c + at(colDisp, r, c), r + at(rowDisp, r, c)]);
    }
    horizontal.push(line);
  }
  const vertical: Polyline[] = [];
  for (let c = 0; c < cols; c += spacing) {
    const line: Polyline = [];
    for (let r = 0; r < rows; r++) {
      line.push([c + at(colDisp, r, c), r + at(rowDisp, r, c)]);
    }
    vertical.push(line);
  }
  return { horizontal, vertical };
}

/** Render the lattice onto a canvas, scaling plane coords to its size. */
export function drawGrid(
  canvas: HTMLCanvasElement,
  grid: GridLines,
  planeCols: number,
  planeRows: number,
  color = 'rgba(80, 180, 255, 0.8)',
): void {
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  const sx = canvas.width / Math.max(1, planeCols - 1);
  const sy = canvas.height / Math.max(1, planeRows - 1);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  for (const group of [grid.horizontal, grid.vertical]) {
    for (const line of group) {
      ctx.beginPath();
      line.forEach(([x, y], i) => {
        if (i === 0) ctx.moveTo(x * sx, y * sy);
        else ctx.lineTo(x * sx, y * sy);
      });
      ctx.stroke();
    }
  }
}
