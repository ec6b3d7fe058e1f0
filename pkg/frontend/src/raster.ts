// Client-side stroke rasterization and overlay rendering.
//
// The server is the source of truth for edits; this module exists only so
// the preview under the cursor matches what the server will compute. The
// arithmetic mirrors the service bit for bit: distances and falloff in
// float64, map cells stored as float32 between strokes, u8 quantization
// with round-half-even.

import { Amap } from "./amap.js";

export type BrushMode = "add" | "remove";

export interface Stroke {
  mode: BrushMode;
  points: [number, number][]; // (x, y) in display pixels
  radius: number;
  strength: number;
}

export function validateStroke(stroke: Stroke, height: number, width: number): void {
  if (stroke.mode !== "add" && stroke.mode !== "remove") {
    throw new Error(`stroke mode must be add|remove, got ${stroke.mode}`);
  }
  if (stroke.radius < 1) {
    throw new Error(`stroke radius must be >= 1, got ${stroke.radius}`);
  }
  if (!(stroke.strength > 0 && stroke.strength <= 1)) {
    throw new Error(`stroke strength must lie in (0,1], got ${stroke.strength}`);
  }
  if (stroke.points.length === 0) {
    throw new Error("stroke has no points");
  }
  for (const [x, y] of stroke.points) {
    if (!(x >= 0 && x <= width - 1 && y >= 0 && y <= height - 1)) {
      throw new Error(`stroke point (${x}, ${y}) outside ${width}x${height} display`);
    }
  }
}

// Cosine falloff in [0,1]: 1 on the polyline, 0 at the brush radius.
export function strokeFalloff(
  stroke: Stroke,
  height: number,
  width: number,
): Float64Array {
  validateStroke(stroke, height, width);
  const d2 = new Float64Array(height * width).fill(Infinity);
  const pts = stroke.points;
  const segs: [number, number, number, number][] = [];
  if (pts.length > 1) {
    for (let i = 0; i + 1 < pts.length; i++) {
      segs.push([pts[i][0], pts[i][1], pts[i + 1][0], pts[i + 1][1]]);
    }
  } else {
    segs.push([pts[0][0], pts[0][1], pts[0][0], pts[0][1]]);
  }
  for (const [ax, ay, bx, by] of segs) {
    const dx = bx - ax;
    const dy = by - ay;
    const len2 = dx * dx + dy * dy;
    for (let yi = 0; yi < height; yi++) {
      for (let xi = 0; xi < width; xi++) {
        const idx = yi * width + xi;
        let seg: number;
        if (len2 === 0) {
          seg = (xi - ax) * (xi - ax) + (yi - ay) * (yi - ay);
        } else {
          let t = ((xi - ax) * dx + (yi - ay) * dy) / len2;
          t = t < 0 ? 0 : t > 1 ? 1 : t;
          const px = xi - (ax + t * dx);
          const py = yi - (ay + t * dy);
          seg = px * px + py * py;
        }
        if (seg < d2[idx]) d2[idx] = seg;
      }
    }
  }
  const fall = new Float64Array(height * width);
  for (let i = 0; i < fall.length; i++) {
    const d = Math.sqrt(d2[i]);
    fall[i] = d < stroke.radius ? 0.5 * (1.0 + Math.cos((Math.PI * d) / stroke.radius)) : 0.0;
  }
  return fall;
}

// Pull cells toward 1 (add) or 0 (remove) by strength * falloff.
export function applyStroke(map: Amap, stroke: Stroke): Amap {
  const { height, width, values } = map;
  const fall = strokeFalloff(stroke, height, width);
  const out = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) {
    const v = values[i]; // exact f32 -> f64 promotion
    const pull = stroke.strength * fall[i];
    let next = stroke.mode === "add" ? v + pull * (1.0 - v) : v * (1.0 - pull);
    next = next < 0 ? 0 : next > 1 ? 1 : next;
    out[i] = Math.fround(next);
  }
  return { height, width, values: out };
}

export function applyStrokes(map: Amap, strokes: Stroke[]): Amap {
  return strokes.reduce((m, s) => applyStroke(m, s), map);
}

// Classic jet ramp, [0,1] -> RGB in [0,1].
export function jetColormap(v: number): [number, number, number] {
  const clamp01 = (x: number) => (x < 0 ? 0 : x > 1 ? 1 : x);
  return [
    clamp01(1.5 - Math.abs(4.0 * v - 3.0)),
    clamp01(1.5 - Math.abs(4.0 * v - 2.0)),
    clamp01(1.5 - Math.abs(4.0 * v - 1.0)),
  ];
}

// numpy-style rounding: nearest integer, ties to even.
export function roundHalfEven(x: number): number {
  const floor = Math.floor(x);
  const diff = x - floor;
  if (diff > 0.5) return floor + 1;
  if (diff < 0.5) return floor;
  return floor % 2 === 0 ? floor : floor + 1;
}

function toU8(x: number): number {
  const r = roundHalfEven(x);
  return r < 0 ? 0 : r > 255 ? 255 : r;
}

// Alpha-blend the jet heat map over a grayscale image; returns RGB u8
// triples matching the service's overlay endpoint byte for byte.
export function renderOverlay(
  imagePixels: Uint8Array, // grayscale, display size
  map: Amap,
  alpha: number,
): Uint8Array {
  if (!(alpha >= 0 && alpha <= 1)) {
    throw new Error(`alpha must lie in [0,1], got ${alpha}`);
  }
  if (imagePixels.length !== map.height * map.width) {
    throw new Error(
      `image has ${imagePixels.length} pixels for ${map.height}x${map.width} map`,
    );
  }
  const out = new Uint8Array(imagePixels.length * 3);
  for (let i = 0; i < imagePixels.length; i++) {
    const gray = Math.fround(imagePixels[i] / 255); // dataset stores f32 u8/255
    const heat = jetColormap(map.values[i]);
    for (let c = 0; c < 3; c++) {
      const blended = Math.fround((1.0 - alpha) * gray + alpha * heat[c]);
      out[3 * i + c] = toU8(Math.fround(blended * 255.0));
    }
  }
  return out;
}
