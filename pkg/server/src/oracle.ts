/**
 * Ground-truth oracle semantics, identical to the engine's in-process
 * oracles:
 *
 * - detect: every ground-truth mask in document order at confidence 1.0;
 * - segment: the first vertebra containing the prompt, else the nearest
 *   centroid within the capture radius (half the median consecutive
 *   spacing along the chain axis); +10 logits inside, -10 outside;
 * - classify: the class of the vertebra containing the point, else
 *   background.
 */

import { GroundTruth, GtVertebra } from "./annotations.js";
import { Mask, Point, bboxLongSide, centroid, maskContains, principalDirection } from "./raster.js";

export const ORACLE_LOGIT = 10.0;

export interface OracleState {
  gt: GroundTruth;
  centroids: Point[];
  captureRadius: number;
}

function median(values: number[]): number {
  const s = [...values].sort((a, b) => a - b);
  const mid = Math.floor(s.length / 2);
  return s.length % 2 === 1 ? s[mid] : (s[mid - 1] + s[mid]) / 2;
}

export function buildOracle(gt: GroundTruth): OracleState {
  const centroids = gt.vertebrae.map((v) => centroid(v.mask));
  let captureRadius: number;
  if (centroids.length >= 2) {
    const { mx, my, dx, dy } = principalDirection(centroids);
    const keyed = centroids.map((c, i) => ({
      t: (c.x - mx) * dx + (c.y - my) * dy,
      y: c.y,
      x: c.x,
      i,
    }));
    keyed.sort((a, b) => a.t - b.t || a.y - b.y || a.x - b.x);
    const gaps: number[] = [];
    for (let k = 1; k < keyed.length; k++) {
      const a = centroids[keyed[k - 1].i];
      const b = centroids[keyed[k].i];
      const gx = b.x - a.x;
      const gy = b.y - a.y;
      gaps.push(Math.sqrt(gx * gx + gy * gy));
    }
    captureRadius = 0.5 * median(gaps);
  } else {
    captureRadius = bboxLongSide(gt.vertebrae[0].mask);
  }
  return { gt, centroids, captureRadius };
}

export function vertebraAt(state: OracleState, p: Point): number | null {
  for (let i = 0; i < state.gt.vertebrae.length; i++) {
    if (maskContains(state.gt.vertebrae[i].mask, p)) return i;
  }
  return null;
}

export function nearestWithinCapture(state: OracleState, p: Point): number | null {
  let best: number | null = null;
  let bestD = Infinity;
  for (let i = 0; i < state.centroids.length; i++) {
    const dx = state.centroids[i].x - p.x;
    const dy = state.centroids[i].y - p.y;
    const d = Math.sqrt(dx * dx + dy * dy);
    if (d < bestD) {
      best = i;
      bestD = d;
    }
  }
  return best !== null && bestD <= state.captureRadius ? best : null;
}

export interface DetectCandidate {
  mask: Mask;
  confidence: number;
}

export function detect(state: OracleState): DetectCandidate[] {
  return state.gt.vertebrae.map((v) => ({ mask: v.mask, confidence: 1.0 }));
}

/** Logits over the patch grid: +10 inside the chosen vertebra, -10 outside. */
export function segment(
  state: OracleState,
  patchW: number,
  patchH: number,
  patchOx: number,
  patchOy: number,
  promptX: number,
  promptY: number,
): Float32Array {
  const pImg: Point = { x: patchOx + promptX, y: patchOy + promptY };
  let idx = vertebraAt(state, pImg);
  if (idx === null) idx = nearestWithinCapture(state, pImg);
  const values = new Float32Array(patchW * patchH).fill(-ORACLE_LOGIT);
  if (idx !== null) {
    const m = state.gt.vertebrae[idx].mask;
    const xLo = Math.max(patchOx, m.ox);
    const xHi = Math.min(patchOx + patchW, m.ox + m.width);
    const yLo = Math.max(patchOy, m.oy);
    const yHi = Math.min(patchOy + patchH, m.oy + m.height);
    for (let gy = yLo; gy < yHi; gy++) {
      for (let gx = xLo; gx < xHi; gx++) {
        if (m.bits[(gy - m.oy) * m.width + (gx - m.ox)]) {
          values[(gy - patchOy) * patchW + (gx - patchOx)] = ORACLE_LOGIT;
        }
      }
    }
  }
  return values;
}

export function classify(state: OracleState, p: Point): GtVertebra | null {
  const idx = vertebraAt(state, p);
  return idx === null ? null : state.gt.vertebrae[idx];
}
