import type { PredictRequest } from "./types.js";
import { CLAMPED_COLUMN, FILL_MAX, FILL_MIN, NODE_GRID } from "./types.js";

/**
 * A session is exactly the /predict request body, so an exported file can be
 * replayed against the service directly.
 */
export function exportSession(req: PredictRequest): string {
  return JSON.stringify(req, null, 2);
}

export class SessionFormatError extends Error {}

function fail(msg: string): never {
  throw new SessionFormatError(msg);
}

export function importSession(text: string): PredictRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    fail("not valid JSON");
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    fail("expected a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  if (!Array.isArray(obj.loads)) fail("'loads' must be an array");
  if (obj.loads.length === 0) fail("'loads' must not be empty");
  const loads = obj.loads.map((entry, i) => {
    if (typeof entry !== "object" || entry === null) {
      fail(`loads[${i}] must be an object`);
    }
    const l = entry as Record<string, unknown>;
    for (const key of ["node_x", "node_y", "fx", "fy"]) {
      if (typeof l[key] !== "number" || !Number.isFinite(l[key] as number)) {
        fail(`loads[${i}].${key} must be a finite number`);
      }
    }
    const nx = l.node_x as number;
    const ny = l.node_y as number;
    if (!Number.isInteger(nx) || !Number.isInteger(ny)) {
      fail(`loads[${i}] node indices must be integers`);
    }
    if (nx < 0 || nx >= NODE_GRID || ny < 0 || ny >= NODE_GRID) {
      fail(`loads[${i}] node outside the ${NODE_GRID}x${NODE_GRID} grid`);
    }
    if (nx === CLAMPED_COLUMN) {
      fail(`loads[${i}] sits on the clamped edge`);
    }
    if ((l.fx as number) === 0 && (l.fy as number) === 0) {
      fail(`loads[${i}] has zero force`);
    }
    return { node_x: nx, node_y: ny, fx: l.fx as number, fy: l.fy as number };
  });
  if (typeof obj.fill !== "number" || !Number.isFinite(obj.fill)) {
    fail("'fill' must be a number");
  }
  if (obj.fill < FILL_MIN || obj.fill > FILL_MAX) {
    fail(`'fill' must be within [${FILL_MIN}, ${FILL_MAX}]`);
  }
  if (typeof obj.level !== "number" || !Number.isInteger(obj.level) || obj.level < 1) {
    fail("'level' must be a positive integer");
  }
  return { loads, fill: obj.fill, level: obj.level };
}
