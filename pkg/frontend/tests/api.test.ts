import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError, SupersededError } from "../src/api.js";
import type { PredictRequest } from "../src/types.js";

const req: PredictRequest = {
  loads: [{ node_x: 4, node_y: 4, fx: 0, fy: -100 }],
  fill: 0.5,
  level: 4,
};

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("ApiClient", () => {
  it("posts the request body to /predict and parses the response", async () => {
    const fetchMock = vi.fn(async (url: string, init?: RequestInit) => {
      expect(url).toBe("http://svc/predict");
      expect(init?.method).toBe("POST");
      expect(JSON.parse(init?.body as string)).toEqual(req);
      return jsonResponse(200, {
        d: 64,
        densities: new Array(64 * 64).fill(0.5),
        losses: { c: 1, m: 0, f: 0, p: 0.5 },
        inference_ms: 3.2,
      });
    });
    const client = new ApiClient("http://svc", fetchMock);
    const res = await client.predict(req);
    expect(res.d).toBe(64);
    expect(res.densities).toHaveLength(4096);
  });

  it("aborts the in-flight request when a new one is issued", async () => {
    const seenSignals: AbortSignal[] = [];
    const fetchMock = vi.fn(
      (_url: string, init?: RequestInit) =>
        new Promise<Response>((resolve, reject) => {
          const signal = init?.signal as AbortSignal;
          seenSignals.push(signal);
          signal.addEventListener("abort", () =>
            reject(new DOMException("aborted", "AbortError")),
          );
          if (seenSignals.length === 2) {
            resolve(
              jsonResponse(200, {
                d: 8,
                densities: new Array(64).fill(0.5),
                losses: { c: 1, m: 0, f: 0, p: 0.5 },
                inference_ms: 1,
              }),
            );
          }
        }),
    );
    const client = new ApiClient("", fetchMock);
    const first = client.predict(req);
    const second = client.predict({ ...req, fill: 0.6 });
    await expect(first).rejects.toBeInstanceOf(SupersededError);
    await expect(second).resolves.toMatchObject({ d: 8 });
    expect(seenSignals[0].aborted).toBe(true);
    expect(seenSignals[1].aborted).toBe(false);
  });

  it("surfaces server validation errors with the field name", async () => {
    const fetchMock = vi.fn(async () =>
      jsonResponse(400, { error: "fill outside [0.2, 0.8]", field: "fill" }),
    );
    const client = new ApiClient("", fetchMock);
    const err = await client.predict({ ...req, fill: 0.9 }).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(400);
    expect(err.field).toBe("fill");
    expect(err.message).toMatch(/fill/);
  });

  it("health() is false when the service is unreachable", async () => {
    const fetchMock = vi.fn(async () => {
      throw new TypeError("fetch failed");
    });
    const client = new ApiClient("", fetchMock);
    expect(await client.health()).toBe(false);
  });
});
