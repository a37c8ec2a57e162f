// Job progress watcher. One loop per job, one request in flight at a time:
// fetch events from the cursor, apply them, sleep, repeat until the server
// reports a terminal state. The server is authoritative — the monitor never
// guesses at job state between polls, and a 404 means the job is gone
// ("expired") rather than an error to retry.

import type { DragEditApi, ApiError } from "./api.js";
import type { JobEvent, JobState } from "./types.js";

export type MonitorPhase = JobState | "expired";

export interface MonitorHooks {
  onEvent?: (event: JobEvent) => void;
  onPhase?: (phase: MonitorPhase) => void;
}

const TERMINAL: ReadonlySet<string> = new Set(["done", "failed", "interrupted"]);

export class JobMonitor {
  readonly jobId: string;
  cursor = 0;
  phase: MonitorPhase = "queued";
  events: JobEvent[] = [];
  private stopped = false;

  constructor(
    private api: DragEditApi,
    jobId: string,
    private hooks: MonitorHooks = {},
    private intervalMs = 250,
  ) {
    this.jobId = jobId;
  }

  stop(): void {
    this.stopped = true;
  }

  /** Poll until the job reaches a terminal state; resolves with that state. */
  async run(): Promise<MonitorPhase> {
    while (!this.stopped) {
      let batch;
      try {
        batch = await this.api.jobEvents(this.jobId, this.cursor);
      } catch (err) {
        if ((err as ApiError).status === 404) {
          this.setPhase("expired");
          return this.phase;
        }
        throw err;
      }
      for (const event of batch.events) {
        this.events.push(event);
        this.hooks.onEvent?.(event);
      }
      this.cursor = batch.cursor;
      this.setPhase(batch.status);
      if (TERMINAL.has(batch.status)) {
        return this.phase;
      }
      await new Promise((r) => setTimeout(r, this.intervalMs));
    }
    return this.phase;
  }

  private setPhase(phase: MonitorPhase): void {
    if (phase !== this.phase) {
      this.phase = phase;
      this.hooks.onPhase?.(phase);
    }
  }
}

/** Pull the per-step numeric series a sparkline can plot out of the events. */
export function metricSeries(events: JobEvent[]): { label: string; points: number[] }[] {
  const guidance: number[] = [];
  const npml: number[] = [];
  for (const e of events) {
    if (typeof e.metrics?.guidance_norm === "number") guidance.push(e.metrics.guidance_norm);
    if (typeof e.metrics?.npml_after === "number") npml.push(e.metrics.npml_after);
  }
  const out = [];
  if (guidance.length > 0) out.push({ label: "guidance energy", points: guidance });
  if (npml.length > 0) out.push({ label: "attention loss", points: npml });
  return out;
}

/** Latest preview file named by the event stream, if any. */
export function latestPreview(events: JobEvent[]): string | null {
  for (let i = events.length - 1; i >= 0; i--) {
    const p = events[i].preview;
    if (typeof p === "string") return p;
  }
  return null;
}
