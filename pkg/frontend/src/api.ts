// Typed client for the editing service JSON API. Every call goes over HTTP;
// nothing in the UI reaches the model any other way.

import { Stroke } from "./raster.js";

export interface TopK {
  labels: number[];
  probs: number[];
}

export interface HealthInfo {
  status: string;
  samples: number;
  model: { num_classes: number; image_size: [number, number]; map_size: [number, number] };
}

export interface SampleRow {
  id: string;
  label: number;
  predicted: number;
  correct: boolean;
}

export interface SampleView {
  id: string;
  label: number;
  display_size: [number, number];
  image_b64: string;
  map_b64: string;
  overlay_b64: string;
  topk: TopK;
}

export interface EditSession {
  session_id: string;
  sample_id: string;
  status: "draft" | "committed";
  original_map_b64: string;
  edited_map_b64: string;
  before_topk: TopK;
  after_topk: TopK;
  created_at: number;
  updated_at: number;
}

export interface FinetuneJob {
  job_id: string;
  state: "queued" | "running" | "done" | "failed";
  session_ids: string[];
  metrics: Record<string, number> | null;
  message: string | null;
}

export interface ApiErrorBody {
  error: string;
  message: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await res.json();
    if (!res.ok) {
      const err = body as ApiErrorBody;
      throw new ApiError(res.status, err.error ?? "http_error", err.message ?? "");
    }
    return body as T;
  }

  health(): Promise<HealthInfo> {
    return this.request("/health");
  }

  listSamples(filter?: "misclassified" | "all"): Promise<{ samples: SampleRow[]; count: number }> {
    const q = filter && filter !== "all" ? `?filter=${filter}` : "";
    return this.request(`/samples${q}`);
  }

  getSample(id: string): Promise<SampleView> {
    return this.request(`/samples/${id}`);
  }

  submitEdit(
    sampleId: string,
    payload: { map_b64: string } | { strokes: Stroke[] },
    sessionId?: string,
  ): Promise<EditSession> {
    const body: Record<string, unknown> = { ...payload };
    if (sessionId) body.session_id = sessionId;
    return this.request(`/samples/${sampleId}/edits`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  commitSession(sessionId: string): Promise<EditSession> {
    return this.request(`/sessions/${sessionId}/commit`, { method: "POST" });
  }

  startFinetune(config: Record<string, unknown> = {}): Promise<FinetuneJob> {
    return this.request("/jobs/finetune", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(config),
    });
  }

  getJob(jobId: string): Promise<FinetuneJob> {
    return this.request(`/jobs/${jobId}`);
  }
}
