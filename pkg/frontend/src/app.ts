// Page wiring: subscribe to a run stream, render slice panes + grid +
// metric charts, and map the buttons onto control commands.

import { decodeSlice, Plane, SnapshotEvent } from './protocol.js';
import {
  applyEvent,
  applyStateEcho,
  badgeFor,
  controlsEnabled,
  initialView,
  isTerminal,
  latestSnapshot,
  RunView,
} from './state.js';
import { openStream, sendControl, fetchState } from './client.js';
import { drawChart } from './charts.js';
import { gridPolylines, drawGrid } from './gridOverlay.js';

const app = document.querySelector<HTMLDivElement>('#app');
if (app) {
  app.innerHTML = `
    <h1>Field denoising monitor</h1>
    <div class="connect-row">
      <input type="text" id="base-url" value="http://127.0.0.1:8000" />
      <input type="text" id="run-id" placeholder="run id" />
      <button id="connect">Connect</button>
      <span id="badge" class="badge">idle</span>
      <span id="progress"></span>
    </div>
    <div class="controls">
      <button id="pause" disabled>Pause</button>
      <button id="resume" disabled>Resume</button>
      <button id="stop" disabled>Stop &amp; accept</button>
      <label>stride <input type="number" id="stride" value="1" min="1" style="width:4em"/></label>
      <label>axis <select id="axis"><option>0</option><option>1</option><option>2</option></select></label>
      <label>slice <input type="number" id="slice-index" value="0" min="0" style="width:4em"/></label>
      <button id="apply-slice" disabled>Apply</button>
    </div>
    <div class="panes">
      <figure><canvas id="fixed" width="192" height="192"></canvas><figcaption>fixed</figcaption></figure>
      <figure><canvas id="warped" width="192" height="192"></canvas><figcaption>warped</figcaption></figure>
      <figure><canvas id="field" width="192" height="192"></canvas><figcaption>|field|</figcaption></figure>
      <figure><canvas id="grid" width="192" height="192"></canvas><figcaption>grid</figcaption></figure>
    </div>
    <div class="charts">
      <canvas id="chart-ssim" width="280" height="90"></canvas>
      <canvas id="chart-njd" width="280" height="90"></canvas>
      <canvas id="chart-noise" width="280" height="90"></canvas>
    </div>
    <pre id="log"></pre>
  `;
}

const $ = <T extends HTMLElement>(sel: string) => document.querySelector<T>(sel);

let view: RunView = initialView();
let baseUrl = 'http://127.0.0.1:8000';

function paintPlane(canvas: HTMLCanvasElement | null, plane: Plane) {
  const ctx = canvas?.getContext('2d');
  if (!canvas || !ctx) return;
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of plane.values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  const span = hi > lo ? hi - lo : 1;
  const img = ctx.createImageData(plane.cols, plane.rows);
  for (let i = 0; i < plane.values.length; i++) {
    const g = Math.round(((plane.values[i] - lo) / span) * 255);
    img.data[i * 4] = g;
    img.data[i * 4 + 1] = g;
    img.data[i * 4 + 2] = g;
    img.data[i * 4 + 3] = 255;
  }
  // draw at native resolution, then stretch to the canvas box
  const off = document.createElement('canvas');
  off.width = plane.cols;
  off.height = plane.rows;
  off.getContext('2d')?.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function inPlaneChannels(snap: SnapshotEvent): { rowDisp: Plane; colDisp: Plane } {
  const axis = snap.fixed.axis;
  const others = [0, 1, 2].filter((a) => a !== axis); // [row axis, col axis]
  return {
    rowDisp: decodeSlice(snap.phi0[others[0]]),
    colDisp: decodeSlice(snap.phi0[others[1]]),
  };
}

function fieldMagnitude(snap: SnapshotEvent): Plane {
  const planes = snap.phi0.map(decodeSlice);
  const { rows, cols } = planes[0];
  const values = new Float32Array(rows * cols);
  for (let i = 0; i < values.length; i++) {
    values[i] = Math.hypot(planes[0].values[i], planes[1].values[i], planes[2].values[i]);
  }
  return { rows, cols, values };
}

function render() {
  const badge = $('#badge');
  if (badge) {
    badge.textContent = badgeFor(view);
    badge.className = `badge ${isTerminal(view) ? 'terminal' : view.status}`;
  }
  const progress = $('#progress');
  if (progress) {
    progress.textContent = view.numSteps
      ? `step ${view.step}/${view.numSteps} (t=${view.t ?? '-'})`
      : '';
  }
  const enabled = controlsEnabled(view);
  for (const id of ['#pause', '#resume', '#stop', '#apply-slice']) {
    const b = $<HTMLButtonElement>(id);
    if (b) b.disabled = !enabled;
  }
  const snap = latestSnapshot(view);
  if (snap) {
    paintPlane($('#fixed'), decodeSlice(snap.fixed));
    paintPlane($('#warped'), decodeSlice(snap.warped));
    paintPlane($('#field'), fieldMagnitude(snap));
    const gridCanvas = $<HTMLCanvasElement>('#grid');
    if (gridCanvas) {
      const { rowDisp, colDisp } = inPlaneChannels(snap);
      drawGrid(gridCanvas, gridPolylines(rowDisp, colDisp, 2), colDisp.cols, colDisp.rows);
    }
  }
  const ssim = $<HTMLCanvasElement>('#chart-ssim');
  if (ssim) drawChart(ssim, view.series.map((p) => ({ x: p.step, y: p.ssim })), 'ssim');
  const njdChart = $<HTMLCanvasElement>('#chart-njd');
  if (njdChart) drawChart(njdChart, view.series.map((p) => ({ x: p.step, y: p.njd })), 'njd %', '#ffb74d');
  const noise = $<HTMLCanvasElement>('#chart-noise');
  if (noise) drawChart(noise, view.series.map((p) => ({ x: p.step, y: p.noisePower })), 'noise power', '#e57373');
  const log = $('#log');
  if (log && view.error) log.textContent = view.error;
}

async function control(cmd: Parameters<typeof sendControl>[2]) {
  if (!view.runId) return;
  try {
    const echo = await sendControl(baseUrl, view.runId, cmd);
    view = applyStateEcho(view, echo);
  } catch (err) {
    const log = $('#log');
    if (log) log.textContent = String(err);
  }
  render();
}

function connect(runId: string) {
  view = initialView();
  render();
  fetchState(baseUrl, runId)
    .then((st) => {
      view = applyStateEcho(view, st);
      render();
    })
    .catch(() => undefined);
  void openStream(baseUrl, runId, {
    onEvent(ev) {
      view = applyEvent(view, ev);
      render();
    },
    onError(err) {
      view = { ...view, error: String(err), status: 'failed' };
      render();
    },
  });
}

$('#connect')?.addEventListener('click', () => {
  baseUrl = $<HTMLInputElement>('#base-url')?.value.replace(/\/$/, '') || baseUrl;
  const runId = $<HTMLInputElement>('#run-id')?.value.trim();
  if (runId) connect(runId);
});
$('#pause')?.addEventListener('click', () => void control({ command: 'pause' }));
$('#resume')?.addEventListener('click', () => void control({ command: 'resume' }));
$('#stop')?.addEventListener('click', () => void control({ command: 'stop_and_accept' }));
$('#apply-slice')?.addEventListener('click', () => {
  const stride = Number($<HTMLInputElement>('#stride')?.value || '1');
  const axis = Number($<HTMLSelectElement>('#axis')?.value || '0');
  const index = Number($<HTMLInputElement>('#slice-index')?.value || '0');
  void control({ command: 'set_stream_stride', stride: Math.max(1, stride) });
  void control({ command: 'set_slice', axis, index });
});
