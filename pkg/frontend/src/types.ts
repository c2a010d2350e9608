/** Wire types for the inference service. */

export interface Load {
  node_x: number;
  node_y: number;
  fx: number;
  fy: number;
}

export interface PredictRequest {
  loads: Load[];
  fill: number;
  level: number;
}

export interface Losses {
  c: number;
  m: number;
  f: number;
  p: number;
}

export interface PredictResponse {
  d: number;
  densities: number[];
  losses: Losses;
  inference_ms: number;
}

export interface ModelInfo {
  levels: number;
  d_inp: number;
  arch_hash: string;
  weights_sha256: string;
}

/** Grid of clickable nodes: (d_inp + 1) per side at level 1. */
export const NODE_GRID = 9;
/** Left edge (node_x = 0) is clamped; loads there are inadmissible. */
export const CLAMPED_COLUMN = 0;
export const FILL_MIN = 0.2;
export const FILL_MAX = 0.8;
/** Training used a fixed 100 N magnitude; other values are extrapolation. */
export const TRAINED_MAGNITUDE = 100;
