// HTTP/stream plumbing. The stream is line-delimited JSON over a plain
// GET response; lines may arrive split across chunks, so reassembly is
// factored out for testing.

import { ControlCommand, parseEvent, RunState, StreamEvent } from './protocol.js';

export interface LineSplitter {
  push(chunk: string): void;
  flush(): void;
}

/** Reassemble NDJSON lines from arbitrary chunk boundaries. */
export function ndjsonSplitter(onLine: (line: string) => void): LineSplitter {
  let buf = '';
  return {
    push(chunk: string) {
      buf += chunk;
      let nl: number;
      while ((nl = buf.indexOf('\n')) >= 0) {
        const line = buf.slice(0, nl).trim();
        buf = buf.slice(nl + 1);
        if (line) onLine(line);
      }
    },
    flush() {
      const line = buf.trim();
      buf = '';
      if (line) onLine(line);
    },
  };
}

export interface StreamHandlers {
  onEvent(ev: StreamEvent): void;
  onError?(err: unknown): void;
  onClose?(): void;
}

type FetchLike = typeof fetch;

/**
 * Open the event stream for a run and dispatch each event until the
 * server closes it (one terminal event ends every stream).
 */
export async function openStream(
  baseUrl: string,
  runId: string,
  handlers: StreamHandlers,
  fetchImpl: FetchLike = fetch,
): Promise<void> {
  try {
    const resp = await fetchImpl(`${baseUrl}/runs/${runId}/stream`);
    if (!resp.ok || !resp.body) {
      throw new Error(`stream request failed: ${resp.status}`);
    }
    const splitter = ndjsonSplitter((line) => handlers.onEvent(parseEvent(line)));
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      splitter.push(decoder.decode(value, { stream: true }));
    }
    splitter.push(decoder.decode());
    splitter.flush();
    handlers.onClose?.();
  } catch (err) {
    handlers.onError?.(err);
  }
}

async function jsonOrThrow(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = await resp.json();
      if (body && body.detail) detail = `${resp.status}: ${body.detail}`;
    } catch {
      // keep the bare status
    }
    throw new Error(`request failed (${detail})`);
  }
  return resp.json();
}

export async function sendControl(
  baseUrl: string,
  runId: string,
  cmd: ControlCommand,
  fetchImpl: FetchLike = fetch,
): Promise<RunState> {
  const resp = await fetchImpl(`${baseUrl}/runs/${runId}/control`, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: JSON.stringify(cmd),
  });
  return jsonOrThrow(resp);
}

export async function fetchState(
  baseUrl: string,
  runId: string,
  fetchImpl: FetchLike = fetch,
): Promise<RunState> {
  return jsonOrThrow(await fetchImpl(`${baseUrl}/runs/${runId}`));
}

export async function startRun(
  baseUrl: string,
  request: Record<string, unknown>,
  fetchImpl: FetchLike = fetch,
): Promise<RunState> {
  const resp = await fetchImpl(`${baseUrl}/runs`, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: JSON.stringify(request),
  });
  return jsonOrThrow(resp);
}
