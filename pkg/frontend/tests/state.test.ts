import { describe, expect, it } from "vitest";

import {
  clampFill,
  forceFromAngle,
  initialState,
  isClickableNode,
  isExtrapolatedMagnitude,
  removeLoad,
  restore,
  setFill,
  setLoad,
  toRequest,
} from "../src/state.js";

describe("node grid", () => {
  it("left (clamped) column is not clickable", () => {
    for (let y = 0; y < 9; y++) expect(isClickableNode(0, y)).toBe(false);
  });

  it("interior and free-edge nodes are clickable", () => {
    expect(isClickableNode(1, 0)).toBe(true);
    expect(isClickableNode(8, 8)).toBe(true);
  });

  it("off-grid nodes are not clickable", () => {
    expect(isClickableNode(9, 4)).toBe(false);
    expect(isClickableNode(4, -1)).toBe(false);
  });
});

describe("force editing", () => {
  it("angle converts to components, snapped to whole degrees", () => {
    const down = forceFromAngle(100, 270);
    expect(down.fx).toBeCloseTo(0, 10);
    expect(down.fy).toBeCloseTo(-100, 10);
    const snapped = forceFromAngle(100, 89.6);
    expect(snapped).toEqual(forceFromAngle(100, 90));
  });

  it("only the trained magnitude avoids the extrapolation badge", () => {
    expect(isExtrapolatedMagnitude(100)).toBe(false);
    expect(isExtrapolatedMagnitude(250)).toBe(true);
  });

  it("placing a load twice on one node replaces it", () => {
    let s = initialState(4);
    s = setLoad(s, { node_x: 4, node_y: 4, fx: 0, fy: -100 });
    s = setLoad(s, { node_x: 4, node_y: 4, fx: 100, fy: 0 });
    expect(s.loads).toHaveLength(1);
    expect(s.loads[0].fx).toBe(100);
  });

  it("rejects loads on the clamped edge", () => {
    expect(() =>
      setLoad(initialState(4), { node_x: 0, node_y: 4, fx: 0, fy: -100 }),
    ).toThrow(/not editable/);
  });

  it("removes loads by node", () => {
    let s = initialState(4);
    s = setLoad(s, { node_x: 4, node_y: 4, fx: 0, fy: -100 });
    s = removeLoad(s, 4, 4);
    expect(s.loads).toHaveLength(0);
  });
});

describe("fill and session state", () => {
  it("fill clamps to the trained range", () => {
    expect(clampFill(0.1)).toBe(0.2);
    expect(clampFill(0.95)).toBe(0.8);
    expect(setFill(initialState(4), 0.55).fill).toBe(0.55);
  });

  it("toRequest/restore roundtrips the canvas", () => {
    let s = initialState(4);
    s = setLoad(s, { node_x: 6, node_y: 2, fx: 50, fy: -86.6 });
    s = setFill(s, 0.33);
    const restored = restore(initialState(4), toRequest(s));
    expect(toRequest(restored)).toEqual(toRequest(s));
    expect(restored.lastResponse).toBeNull();
  });
});
