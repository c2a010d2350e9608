import type { ModelInfo, PredictRequest, PredictResponse } from "./types.js";

/** Error carrying the server's field-level validation feedback. */
export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public field?: string,
  ) {
    super(message);
  }
}

/** Thrown (as rejection) when a newer request supersedes this one. */
export class SupersededError extends Error {
  constructor() {
    super("request superseded");
  }
}

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

/**
 * Client for the inference service. At most one /predict request is in
 * flight; issuing a new one aborts the previous.
 */
export class ApiClient {
  private inflight: AbortController | null = null;

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  async health(): Promise<boolean> {
    try {
      const r = await this.fetchImpl(`${this.baseUrl}/health`);
      return r.ok;
    } catch {
      return false;
    }
  }

  async model(): Promise<ModelInfo> {
    const r = await this.fetchImpl(`${this.baseUrl}/model`);
    if (!r.ok) throw new ApiError(r.status, "model unavailable");
    return (await r.json()) as ModelInfo;
  }

  async predict(req: PredictRequest): Promise<PredictResponse> {
    if (this.inflight) this.inflight.abort();
    const controller = new AbortController();
    this.inflight = controller;
    let r: Response;
    try {
      r = await this.fetchImpl(`${this.baseUrl}/predict`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(req),
        signal: controller.signal,
      });
    } catch (err) {
      if (controller.signal.aborted) throw new SupersededError();
      throw err;
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
    if (!r.ok) {
      let message = `request failed (${r.status})`;
      let field: string | undefined;
      try {
        const body = (await r.json()) as { error?: string; field?: string };
        if (body.error) message = body.error;
        field = body.field;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(r.status, message, field);
    }
    return (await r.json()) as PredictResponse;
  }
}
