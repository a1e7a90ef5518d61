// Client-side view model. The view is a pure function of the event log
// plus user input: applyEvent never mutates, so replaying a recorded log
// always reproduces the same final view.

import {
  RunState,
  SnapshotEvent,
  StreamEvent,
  TerminalEvent,
  TERMINAL_STATES,
} from './protocol.js';

export const METRIC_WINDOW = 400; // chart points kept (scrolling window)
export const SNAPSHOT_BUFFER = 32; // decoded-pane ring buffer

export interface MetricPoint {
  step: number;
  t: number;
  ssim: number;
  njd: number;
  noisePower: number;
  residual: number;
}

export interface RunView {
  runId: string | null;
  status: string;
  step: number;
  t: number | null;
  numSteps: number;
  stride: number;
  sliceAxis: number;
  sliceIndex: number | null;
  snapshots: SnapshotEvent[];
  series: MetricPoint[];
  lastDigest: string | null;
  terminal: TerminalEvent | null;
  error: string | null;
  eventCount: number;
}

export function initialView(): RunView {
  return {
    runId: null,
    status: 'connecting',
    step: 0,
    t: null,
    numSteps: 0,
    stride: 1,
    sliceAxis: 0,
    sliceIndex: null,
    snapshots: [],
    series: [],
    lastDigest: null,
    terminal: null,
    error: null,
    eventCount: 0,
  };
}

function pushCapped<T>(xs: T[], x: T, cap: number): T[] {
  const out = xs.length >= cap ? xs.slice(xs.length - cap + 1) : xs.slice();
  out.push(x);
  return out;
}

export function applyEvent(view: RunView, ev: StreamEvent): RunView {
  const next: RunView = { ...view, runId: ev.run_id, eventCount: view.eventCount + 1 };
  switch (ev.type) {
    case 'state':
      next.status = ev.status;
      next.step = ev.step;
      next.t = ev.t;
      return next;
    case 'snapshot': {
      next.step = ev.step;
      next.t = ev.t;
      next.numSteps = ev.num_steps;
      next.lastDigest = ev.digest;
      next.sliceAxis = ev.fixed.axis;
      next.sliceIndex = ev.fixed.index;
      next.snapshots = pushCapped(view.snapshots, ev, SNAPSHOT_BUFFER);
      next.series = pushCapped(
        view.series,
        {
          step: ev.step,
          t: ev.t,
          ssim: ev.metrics.ssim,
          njd: ev.metrics.njd_pct,
          noisePower: ev.metrics.noise_power,
          residual: ev.metrics.residual_abs,
        },
        METRIC_WINDOW,
      );
      return next;
    }
    case 'terminal':
      next.status = ev.status;
      next.terminal = ev;
      if (ev.status === 'failed') next.error = ev.reason ?? 'run failed';
      return next;
  }
}

/** Reconcile with a state document (poll response or control echo). */
export function applyStateEcho(view: RunView, state: RunState): RunView {
  return {
    ...view,
    runId: state.run_id,
    status: state.status,
    step: state.current_step,
    t: state.current_t,
    numSteps: state.num_steps,
    stride: state.stride,
    sliceAxis: state.slice.axis,
    sliceIndex: state.slice.index,
    lastDigest: state.snapshot_digest ?? view.lastDigest,
    error: state.error ?? view.error,
  };
}

export function replayLog(lines: Iterable<StreamEvent>): RunView {
  let view = initialView();
  for (const ev of lines) view = applyEvent(view, ev);
  return view;
}

export function isTerminal(view: RunView): boolean {
  return TERMINAL_STATES.has(view.status);
}

export function controlsEnabled(view: RunView): boolean {
  return view.runId !== null && !isTerminal(view) && view.status !== 'connecting';
}

/** Text for the status badge; terminal states keep their own names. */
export function badgeFor(view: RunView): string {
  if (view.status === 'connecting') return 'connecting';
  if (view.status === 'failed') return 'failed';
  if (isTerminal(view)) return `terminal:${view.status}`;
  return view.status;
}

export function latestSnapshot(view: RunView): SnapshotEvent | null {
  return view.snapshots.length ? view.snapshots[view.snapshots.length - 1] : null;
}
