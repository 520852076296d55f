/**
 * Raster geometry mirroring the engine's conventions bit for bit:
 * pixel (x, y) is foreground iff its center (x+0.5, y+0.5) lies inside the
 * polygon under the even-odd rule; centroids average integer pixel
 * coordinates; masks are stored cropped to their bounding box with an
 * integer offset into the parent grid.
 */

export interface Mask {
  width: number;
  height: number;
  ox: number;
  oy: number;
  bits: Uint8Array; // row-major, nonzero = foreground
}

export interface Point {
  x: number;
  y: number;
}

export function polygonArea(vx: number[], vy: number[]): number {
  let acc = 0;
  const n = vx.length;
  for (let i = 0; i < n; i++) {
    const j = (i + 1) % n;
    acc += vx[i] * vy[j] - vx[j] * vy[i];
  }
  return 0.5 * acc;
}

/** Even-odd pixel-center fill over the image grid, cropped to the bbox. */
export function rasterizePolygon(vx: number[], vy: number[], imgW: number, imgH: number): Mask | null {
  const xLo = Math.max(0, Math.ceil(Math.min(...vx) - 0.5));
  const xHi = Math.min(imgW - 1, Math.floor(Math.max(...vx) - 0.5));
  const yLo = Math.max(0, Math.ceil(Math.min(...vy) - 0.5));
  const yHi = Math.min(imgH - 1, Math.floor(Math.max(...vy) - 0.5));
  if (xLo > xHi || yLo > yHi) return null;
  const w = xHi - xLo + 1;
  const h = yHi - yLo + 1;
  const bits = new Uint8Array(w * h);
  const n = vx.length;
  for (let jj = 0; jj < h; jj++) {
    const py = yLo + jj + 0.5;
    for (let ii = 0; ii < w; ii++) {
      const px = xLo + ii + 0.5;
      let inside = false;
      let j = n - 1;
      for (let i = 0; i < n; i++) {
        if (vy[i] > py !== vy[j] > py) {
          const xc = ((vx[j] - vx[i]) * (py - vy[i])) / (vy[j] - vy[i]) + vx[i];
          if (px < xc) inside = !inside;
        }
        j = i;
      }
      if (inside) bits[jj * w + ii] = 1;
    }
  }
  return cropToBbox({ width: w, height: h, ox: xLo, oy: yLo, bits });
}

export function cropToBbox(m: Mask): Mask | null {
  let x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (let y = 0; y < m.height; y++) {
    for (let x = 0; x < m.width; x++) {
      if (m.bits[y * m.width + x]) {
        if (x < x0) x0 = x;
        if (x > x1) x1 = x;
        if (y < y0) y0 = y;
        if (y > y1) y1 = y;
      }
    }
  }
  if (x1 < 0) return null;
  const w = x1 - x0 + 1;
  const h = y1 - y0 + 1;
  const bits = new Uint8Array(w * h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      bits[y * w + x] = m.bits[(y + y0) * m.width + (x + x0)];
    }
  }
  return { width: w, height: h, ox: m.ox + x0, oy: m.oy + y0, bits };
}

/** Mean of integer pixel coordinates in parent-grid units; sums are exact. */
export function centroid(m: Mask): Point {
  let sx = 0;
  let sy = 0;
  let n = 0;
  for (let y = 0; y < m.height; y++) {
    for (let x = 0; x < m.width; x++) {
      if (m.bits[y * m.width + x]) {
        sx += x + m.ox;
        sy += y + m.oy;
        n += 1;
      }
    }
  }
  if (n === 0) throw new Error("centroid of empty mask");
  return { x: sx / n, y: sy / n };
}

/** Whether the pixel nearest to p (floor(p+0.5)) is foreground. */
export function maskContains(m: Mask, p: Point): boolean {
  const ix = Math.floor(p.x + 0.5) - m.ox;
  const iy = Math.floor(p.y + 0.5) - m.oy;
  if (ix < 0 || iy < 0 || ix >= m.width || iy >= m.height) return false;
  return m.bits[iy * m.width + ix] !== 0;
}

export function bboxLongSide(m: Mask): number {
  return Math.max(m.width, m.height);
}

/** Dominant eigenvector of the 2x2 covariance, sign fixed so dy >= 0. */
export function principalDirection(points: Point[]): { mx: number; my: number; dx: number; dy: number } {
  const n = points.length;
  let mx = 0, my = 0;
  for (const p of points) { mx += p.x; my += p.y; }
  mx /= n;
  my /= n;
  let sxx = 0, sxy = 0, syy = 0;
  for (const p of points) {
    const dx = p.x - mx;
    const dy = p.y - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  const halfTrace = 0.5 * (sxx + syy);
  const det = sxx * syy - sxy * sxy;
  const lam = halfTrace + Math.sqrt(Math.max(halfTrace * halfTrace - det, 0));
  const v1: [number, number] = [lam - syy, sxy];
  const v2: [number, number] = [sxy, lam - sxx];
  let [dx, dy] = v1[0] * v1[0] + v1[1] * v1[1] >= v2[0] * v2[0] + v2[1] * v2[1] ? v1 : v2;
  let norm = Math.sqrt(dx * dx + dy * dy);
  if (norm === 0) {
    dx = 0;
    dy = 1;
    norm = 1;
  }
  dx /= norm;
  dy /= norm;
  if (dy < 0 || (dy === 0 && dx < 0)) {
    dx = -dx;
    dy = -dy;
  }
  return { mx, my, dx, dy };
}
