/**
 * Density-field rendering. Densities arrive column-major
 * (value[i + d*j] = element at row i, column j); 1 maps to black, matching
 * the server's PNG export so screenshots and files agree.
 */

export function densityToGray(v: number): number {
  const clamped = Math.min(1, Math.max(0, v));
  return Math.round(255 * (1 - clamped));
}

/** RGBA pixel buffer (one pixel per element, row-major) for a d x d field. */
export function densitiesToRgba(densities: number[], d: number): Uint8ClampedArray {
  if (densities.length !== d * d) {
    throw new Error(`expected ${d * d} densities, got ${densities.length}`);
  }
  const out = new Uint8ClampedArray(4 * d * d);
  for (let row = 0; row < d; row++) {
    for (let col = 0; col < d; col++) {
      const gray = densityToGray(densities[row + d * col]);
      const px = 4 * (row * d + col);
      out[px] = gray;
      out[px + 1] = gray;
      out[px + 2] = gray;
      out[px + 3] = 255;
    }
  }
  return out;
}

/** Draw the field onto a canvas, one element per cell, nearest-neighbour. */
export function drawField(
  canvas: HTMLCanvasElement,
  densities: number[],
  d: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas context unavailable");
  const image = new ImageData(new Uint8ClampedArray(densitiesToRgba(densities, d)), d, d);
  const off = new OffscreenCanvas(d, d);
  const offCtx = off.getContext("2d");
  if (!offCtx) throw new Error("offscreen 2d context unavailable");
  offCtx.putImageData(image, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}
