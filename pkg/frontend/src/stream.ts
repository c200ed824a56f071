/**
 * Resumable event-stream client over the service's server-sent events
 * endpoint.  Tracks the last delivered sequence number; reconnects resume
 * with ``since=lastSeq``, duplicates are dropped and a gap triggers a
 * reconnect from the last good cursor, so the consumer sees every event
 * exactly once, in order.
 */

import type { TranscriptEvent } from "./types.js";

export interface StreamOptions {
  fetchImpl?: typeof fetch;
  /** delay between reconnect attempts */
  retryMs?: number;
  /** extra headers (e.g. Authorization) */
  headers?: Record<string, string>;
}

export function parseSseChunk(buffer: string): { events: string[]; rest: string } {
  const parts = buffer.split("\n\n");
  const rest = parts.pop() ?? "";
  const events: string[] = [];
  for (const part of parts) {
    const data = part
      .split("\n")
      .filter((line) => line.startsWith("data: "))
      .map((line) => line.slice("data: ".length))
      .join("\n");
    if (data) events.push(data);
  }
  return { events, rest };
}

export class EventStreamClient {
  lastSeq = 0;
  private stopped = false;
  private controller: AbortController | null = null;

  constructor(
    private readonly baseUrl: string,
    private readonly sessionId: string,
    private readonly onEvent: (event: TranscriptEvent) => void,
    private readonly options: StreamOptions = {},
  ) {}

  /** Consume the stream until stop(); resolves when stopped. */
  async run(): Promise<void> {
    const fetchImpl = this.options.fetchImpl ?? fetch;
    const retryMs = this.options.retryMs ?? 1000;
    while (!this.stopped) {
      this.controller = new AbortController();
      const url = `${this.baseUrl}/sessions/${this.sessionId}/events?since=${this.lastSeq}`;
      try {
        const response = await fetchImpl(url, {
          signal: this.controller.signal,
          headers: { Accept: "text/event-stream", ...(this.options.headers ?? {}) },
        });
        if (!response.ok || !response.body) {
          throw new Error(`stream request failed: ${response.status}`);
        }
        const gap = await this.consume(response.body);
        if (gap) continue; // reconnect immediately from lastSeq
      } catch (error) {
        if (this.stopped) return;
      }
      if (!this.stopped) await sleep(retryMs);
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<boolean> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    try {
      for (;;) {
        const { done, value } = await reader.read();
        if (done) return false;
        buffer += decoder.decode(value, { stream: true });
        const { events, rest } = parseSseChunk(buffer);
        buffer = rest;
        for (const data of events) {
          if (this.stopped) return false;
          let event: TranscriptEvent;
          try {
            event = JSON.parse(data) as TranscriptEvent;
          } catch {
            continue; // malformed frame; the view layer shows raw warnings
          }
          if (event.seq <= this.lastSeq) continue; // duplicate after resume
          if (event.seq > this.lastSeq + 1) {
            // gap: abandon this connection and resume from the cursor
            await reader.cancel();
            return true;
          }
          this.lastSeq = event.seq;
          this.onEvent(event);
        }
      }
    } finally {
      reader.releaseLock();
    }
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
