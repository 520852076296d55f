/**
 * Annotation document ingestion: UTF-8 JSON with image_path, width, height,
 * region, and vertebrae [{label, polygon: [[x, y], ...]}]. Labels must come
 * from the level vocabulary and be unique per image.
 */

import { readFileSync } from "node:fs";
import { Mask, polygonArea, rasterizePolygon } from "./raster.js";

export const LEVELS = [
  "C2", "C3", "C4", "C5", "C6", "C7", "T1",
  "T12", "L1", "L2", "L3", "L4", "L5", "S1",
] as const;

export const SPINE_ENDS = new Set(["C2", "S1"]);

export interface GtVertebra {
  label: string;
  mask: Mask;
  tag: "regular" | "spine_end";
  spineEndKind: string | null;
}

export interface GroundTruth {
  width: number;
  height: number;
  region: string;
  vertebrae: GtVertebra[];
}

export function loadAnnotations(path: string): GroundTruth {
  const raw = JSON.parse(readFileSync(path, "utf-8"));
  if (typeof raw !== "object" || raw === null) throw new Error(`${path}: not an object`);
  const width = raw.width;
  const height = raw.height;
  const region = raw.region;
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
    throw new Error(`${path}: bad dimensions`);
  }
  if (region !== "cervical" && region !== "lumbar") {
    throw new Error(`${path}: bad region ${region}`);
  }
  if (!Array.isArray(raw.vertebrae)) throw new Error(`${path}: missing vertebrae`);
  const seen = new Set<string>();
  const vertebrae: GtVertebra[] = [];
  for (const item of raw.vertebrae) {
    const label = item?.label;
    if (typeof label !== "string" || !(LEVELS as readonly string[]).includes(label)) {
      throw new Error(`${path}: unknown label ${label}`);
    }
    if (seen.has(label)) throw new Error(`${path}: duplicate label ${label}`);
    seen.add(label);
    const poly = item.polygon;
    if (!Array.isArray(poly) || poly.length < 3) {
      throw new Error(`${path}: ${label} polygon too short`);
    }
    const vx: number[] = [];
    const vy: number[] = [];
    for (const v of poly) {
      if (!Array.isArray(v) || v.length !== 2) throw new Error(`${path}: bad vertex`);
      // clamp into the image like the engine's loader does
      vx.push(Math.min(Math.max(Number(v[0]), 0), width));
      vy.push(Math.min(Math.max(Number(v[1]), 0), height));
    }
    if (Math.abs(polygonArea(vx, vy)) < 1e-12) continue; // degenerate: skip
    const mask = rasterizePolygon(vx, vy, width, height);
    if (mask === null) continue;
    const isEnd = SPINE_ENDS.has(label);
    vertebrae.push({
      label,
      mask,
      tag: isEnd ? "spine_end" : "regular",
      spineEndKind: isEnd ? label : null,
    });
  }
  if (vertebrae.length === 0) throw new Error(`${path}: no usable vertebrae`);
  return { width, height, region, vertebrae };
}
