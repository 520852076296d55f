/**
 * Protocol v1: newline-delimited JSON request/response over stdio.
 * Requests: {id, op: init|detect|segment|classify|shutdown, ...payload}.
 * Responses echo the id and carry status ok|error. Rasters are
 * {width, height, dtype: u8|f32, encoding: base64 LE row-major, offset}.
 */

import { Mask } from "./raster.js";
import { OracleState, classify, detect, segment } from "./oracle.js";

export const PROTOCOL_VERSION = 1;
export const MAX_PAYLOAD_BYTES = 64 * 1024 * 1024;

export interface RasterPayload {
  width: number;
  height: number;
  dtype: "u8" | "f32";
  encoding: string;
  offset: [number, number];
}

export function encodeMaskU8(m: Mask): RasterPayload {
  return {
    width: m.width,
    height: m.height,
    dtype: "u8",
    encoding: Buffer.from(m.bits).toString("base64"),
    offset: [m.ox, m.oy],
  };
}

export function encodeF32(values: Float32Array, w: number, h: number,
                          offset: [number, number]): RasterPayload {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) buf.writeFloatLE(values[i], i * 4);
  return { width: w, height: h, dtype: "f32", encoding: buf.toString("base64"), offset };
}

export function decodeRasterHeader(obj: unknown): { w: number; h: number; ox: number; oy: number; bytes: Buffer; dtype: string } {
  if (typeof obj !== "object" || obj === null) throw new Error("raster payload is not an object");
  const r = obj as Record<string, unknown>;
  const w = r.width, h = r.height, dtype = r.dtype, offset = r.offset;
  if (!Number.isInteger(w) || !Number.isInteger(h) || (w as number) < 0 || (h as number) < 0) {
    throw new Error("bad raster dims");
  }
  if (dtype !== "u8" && dtype !== "f32") throw new Error(`bad raster dtype ${dtype}`);
  if (!Array.isArray(offset) || offset.length !== 2
      || !Number.isInteger(offset[0]) || !Number.isInteger(offset[1])) {
    throw new Error("bad raster offset");
  }
  if (typeof r.encoding !== "string") throw new Error("missing raster encoding");
  const itemSize = dtype === "u8" ? 1 : 4;
  const expected = (w as number) * (h as number) * itemSize;
  if (expected > MAX_PAYLOAD_BYTES) throw new Error("raster exceeds payload cap");
  const bytes = Buffer.from(r.encoding, "base64");
  if (bytes.length !== expected) {
    throw new Error(`raster payload ${bytes.length} bytes, expected ${expected}`);
  }
  return { w: w as number, h: h as number, ox: offset[0], oy: offset[1], bytes, dtype };
}

type Json = Record<string, unknown>;

export function handleRequest(state: OracleState, msg: Json): Json {
  const id = typeof msg.id === "number" ? msg.id : null;
  const fail = (why: string): Json => ({ id, status: "error", error_msg: why });
  if (id === null) return fail("missing request id");
  const op = msg.op;
  switch (op) {
    case "init": {
      if (msg.protocol_version !== PROTOCOL_VERSION) {
        return fail(`unsupported protocol_version ${msg.protocol_version}`);
      }
      return { id, status: "ok", protocol_version: PROTOCOL_VERSION };
    }
    case "detect": {
      let header;
      try {
        header = decodeRasterHeader(msg.image);
      } catch (e) {
        return fail(String(e));
      }
      if (header.w !== state.gt.width || header.h !== state.gt.height) {
        return fail(`image dims ${header.w}x${header.h} != annotation dims `
          + `${state.gt.width}x${state.gt.height}`);
      }
      const candidates = detect(state).map((c) => ({
        mask: encodeMaskU8(c.mask),
        confidence: c.confidence,
      }));
      return { id, status: "ok", candidates };
    }
    case "segment": {
      let header;
      try {
        header = decodeRasterHeader(msg.patch);
      } catch (e) {
        return fail(String(e));
      }
      const prompt = msg.prompt;
      if (!Array.isArray(prompt) || prompt.length !== 2
          || typeof prompt[0] !== "number" || typeof prompt[1] !== "number") {
        return fail("bad prompt");
      }
      const [px, py] = prompt;
      if (px < 0 || py < 0 || px >= header.w || py >= header.h) {
        return fail(`prompt (${px}, ${py}) outside patch ${header.w}x${header.h}`);
      }
      const values = segment(state, header.w, header.h, header.ox, header.oy, px, py);
      return { id, status: "ok",
               logits: encodeF32(values, header.w, header.h, [header.ox, header.oy]) };
    }
    case "classify": {
      const point = msg.point;
      if (!Array.isArray(point) || point.length !== 2
          || typeof point[0] !== "number" || typeof point[1] !== "number") {
        return fail("bad point");
      }
      const v = classify(state, { x: point[0], y: point[1] });
      if (v === null) {
        return { id, status: "ok", tag: "background", spine_end_kind: null };
      }
      return { id, status: "ok", tag: v.tag, spine_end_kind: v.spineEndKind };
    }
    case "shutdown":
      return { id, status: "ok" };
    default:
      return fail(`unknown op ${JSON.stringify(op)}`);
  }
}
