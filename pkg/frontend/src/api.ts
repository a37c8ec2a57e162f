// Thin typed client for the editing service. Image and mask uploads are raw
// PNG bytes in the request body; everything else is JSON. Result, preview,
// and attention images are addressed by URL so <img> tags can point at the
// service directly.

import type {
  EditSpec,
  EventsResponse,
  HealthzResponse,
  JobStatusResponse,
  Violation,
} from "./types.js";

export class ApiError extends Error {
  status: number;
  violations: Violation[];

  constructor(status: number, detail: unknown) {
    const violations =
      typeof detail === "object" && detail !== null && Array.isArray((detail as any).violations)
        ? ((detail as any).violations as Violation[])
        : [];
    super(
      violations.length > 0
        ? `spec rejected: ${violations.map((v) => `${v.pointer}: ${v.message}`).join("; ")}`
        : typeof detail === "string"
          ? detail
          : `request failed with status ${status}`,
    );
    this.status = status;
    this.violations = violations;
  }
}

async function raise(res: Response): Promise<never> {
  let detail: unknown = null;
  try {
    detail = (await res.json())?.detail;
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(res.status, detail);
}

export class DragEditApi {
  readonly base: string;

  constructor(base: string) {
    this.base = base.replace(/\/+$/, "");
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.base + path, init);
    if (!res.ok) await raise(res);
    return (await res.json()) as T;
  }

  private postBytes(path: string, bytes: Uint8Array): Promise<{ session_id: string; stored?: string }> {
    return this.json(path, {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: bytes as BodyInit,
    });
  }

  healthz(): Promise<HealthzResponse> {
    return this.json("/healthz");
  }

  schema(): Promise<Record<string, any>> {
    return this.json("/schema/edit-spec");
  }

  async createSession(imagePng?: Uint8Array): Promise<string> {
    const out = await this.json<{ session_id: string }>("/sessions", {
      method: "POST",
      ...(imagePng ? { headers: { "Content-Type": "image/png" }, body: imagePng as BodyInit } : {}),
    });
    return out.session_id;
  }

  uploadImage(sid: string, png: Uint8Array) {
    return this.postBytes(`/sessions/${sid}/image`, png);
  }

  uploadMask(sid: string, png: Uint8Array) {
    return this.postBytes(`/sessions/${sid}/mask`, png);
  }

  uploadAsset(sid: string, name: string, png: Uint8Array) {
    return this.postBytes(`/sessions/${sid}/assets/${name}`, png);
  }

  invert(sid: string, prompt: string, seed: number, cfgScale: number) {
    return this.json<{ cached: boolean; trajectory: Record<string, unknown> }>(
      `/sessions/${sid}/invert`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ prompt, seed, cfg_scale: cfgScale }),
      },
    );
  }

  async submitJob(sid: string, spec: EditSpec): Promise<string> {
    const out = await this.json<{ job_id: string }>(`/sessions/${sid}/jobs`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(spec),
    });
    return out.job_id;
  }

  jobStatus(jid: string): Promise<JobStatusResponse> {
    return this.json(`/jobs/${jid}`);
  }

  jobEvents(jid: string, cursor: number): Promise<EventsResponse> {
    return this.json(`/jobs/${jid}/events?cursor=${cursor}`);
  }

  deleteSession(sid: string): Promise<void> {
    return fetch(`${this.base}/sessions/${sid}`, { method: "DELETE" }).then(async (res) => {
      if (!res.ok) await raise(res);
    });
  }

  resultUrl(jid: string, branch: "branch1" | "branch2"): string {
    return `${this.base}/jobs/${jid}/result/${branch}`;
  }

  previewUrl(jid: string, name: string): string {
    return `${this.base}/jobs/${jid}/preview/${name}`;
  }

  attentionUrl(sid: string, token: number, t: number, job?: string): string {
    const extra = job ? `&job=${job}` : "";
    return `${this.base}/sessions/${sid}/attention?token=${token}&t=${t}${extra}`;
  }
}
