import type { Load, PredictRequest, PredictResponse } from "./types.js";
import {
  CLAMPED_COLUMN,
  FILL_MAX,
  FILL_MIN,
  NODE_GRID,
  TRAINED_MAGNITUDE,
} from "./types.js";

/**
 * Canvas state and its pure transitions. The rendered UI is a function of
 * (loads, fill, lastResponse); no physics happens client-side.
 */
export interface DesignState {
  loads: Load[];
  fill: number;
  level: number;
  lastResponse: PredictResponse | null;
}

export function initialState(level: number): DesignState {
  return { loads: [], fill: 0.5, level, lastResponse: null };
}

export function isClickableNode(nodeX: number, nodeY: number): boolean {
  return (
    Number.isInteger(nodeX) &&
    Number.isInteger(nodeY) &&
    nodeX > CLAMPED_COLUMN &&
    nodeX < NODE_GRID &&
    nodeY >= 0 &&
    nodeY < NODE_GRID
  );
}

/** Force components for a magnitude (N) and angle (degrees, 0 = +x, CCW). */
export function forceFromAngle(
  magnitude: number,
  angleDeg: number,
): { fx: number; fy: number } {
  const snapped = Math.round(angleDeg); // dial snaps to whole degrees
  const rad = (snapped * Math.PI) / 180;
  return { fx: magnitude * Math.cos(rad), fy: magnitude * Math.sin(rad) };
}

export function isExtrapolatedMagnitude(magnitude: number): boolean {
  return magnitude !== TRAINED_MAGNITUDE;
}

export function clampFill(fill: number): number {
  return Math.min(FILL_MAX, Math.max(FILL_MIN, fill));
}

export function setLoad(state: DesignState, load: Load): DesignState {
  if (!isClickableNode(load.node_x, load.node_y)) {
    throw new Error(`node (${load.node_x}, ${load.node_y}) is not editable`);
  }
  const others = state.loads.filter(
    (l) => l.node_x !== load.node_x || l.node_y !== load.node_y,
  );
  return { ...state, loads: [...others, load] };
}

export function removeLoad(
  state: DesignState,
  nodeX: number,
  nodeY: number,
): DesignState {
  return {
    ...state,
    loads: state.loads.filter((l) => l.node_x !== nodeX || l.node_y !== nodeY),
  };
}

export function setFill(state: DesignState, fill: number): DesignState {
  return { ...state, fill: clampFill(fill) };
}

export function setResponse(
  state: DesignState,
  response: PredictResponse,
): DesignState {
  return { ...state, lastResponse: response };
}

export function toRequest(state: DesignState): PredictRequest {
  return { loads: state.loads, fill: state.fill, level: state.level };
}

export function restore(
  state: DesignState,
  req: PredictRequest,
): DesignState {
  return {
    ...state,
    loads: req.loads,
    fill: req.fill,
    level: req.level,
    lastResponse: null,
  };
}
