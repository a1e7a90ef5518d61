// Wire types for the steering service. Everything here mirrors the JSON
// the server actually sends; the client renders server data and never
// invents physics of its own.

export const SCHEMA_VERSION = 1;

/** One 2D plane extracted from a volume, pixels as base64 float32 LE rows. */
export interface SlicePayload {
  shape: number[]; // [rows, cols]
  axis: number;
  index: number;
  data: string;
}

export interface SnapshotMetrics {
  ssim: number;
  njd_pct: number;
  residual_abs: number;
  noise_power: number;
}

export interface SnapshotEvent {
  v: number;
  run_id: string;
  type: 'snapshot';
  t: number;
  step: number;
  num_steps: number;
  elapsed_s: number;
  digest: string;
  metrics: SnapshotMetrics;
  fixed: SlicePayload;
  warped: SlicePayload;
  phi0: SlicePayload[]; // one slice per displacement channel
}

export interface StateEvent {
  v: number;
  run_id: string;
  type: 'state';
  status: string;
  step: number;
  t: number | null;
}

export interface TerminalEvent {
  v: number;
  run_id: string;
  type: 'terminal';
  status: 'completed' | 'stopped_early' | 'failed';
  steps_run: number;
  early_stopped: boolean;
  reason?: string;
}

export type StreamEvent = SnapshotEvent | StateEvent | TerminalEvent;

export interface RunState {
  v: number;
  run_id: string;
  status: string;
  current_t: number | null;
  current_step: number;
  num_steps: number;
  stride: number;
  slice: { axis: number; index: number | null };
  snapshot_digest: string | null;
  error: string | null;
  config: Record<string, unknown>;
}

export type ControlCommand =
  | { command: 'pause' }
  | { command: 'resume' }
  | { command: 'stop_and_accept' }
  | { command: 'set_stream_stride'; stride: number }
  | { command: 'set_slice'; axis: number; index: number };

export const TERMINAL_STATES: ReadonlySet<string> = new Set([
  'completed',
  'stopped_early',
  'failed',
]);

/** Decoded pixel plane, row-major. */
export interface Plane {
  rows: number;
  cols: number;
  values: Float32Array;
}

export function decodeSlice(p: SlicePayload): Plane {
  const [rows, cols] = p.shape;
  const raw = atob(p.data);
  const expected = rows * cols * 4;
  if (raw.length !== expected) {
    throw new Error(`slice payload is ${raw.length} bytes, expected ${expected}`);
  }
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  const dv = new DataView(bytes.buffer);
  const values = new Float32Array(rows * cols);
  for (let i = 0; i < values.length; i++) {
    values[i] = dv.getFloat32(i * 4, true); // little-endian
  }
  return { rows, cols, values };
}

/** Parse one NDJSON line into a typed event, rejecting unknown schema versions. */
export function parseEvent(line: string): StreamEvent {
  const obj = JSON.parse(line);
  if (obj.v !== SCHEMA_VERSION) {
    throw new Error(`unsupported schema version ${obj.v}`);
  }
  if (obj.type !== 'snapshot' && obj.type !== 'state' && obj.type !== 'terminal') {
    throw new Error(`unknown event type ${String(obj.type)}`);
  }
  return obj as StreamEvent;
}
