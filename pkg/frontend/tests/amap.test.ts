// Codec round trips and quantization helpers. Error messages deliberately
// mirror the service's wording so a reader can trace a failure to either
// side of the wire.

import { describe, expect, it } from "vitest";
import {
  base64ToBytes,
  bytesToBase64,
  decodeAmap,
  decodeAmapBase64,
  decodePgm,
  decodePpm,
  encodeAmap,
  encodeAmapBase64,
  Amap,
} from "../src/amap.js";
import { jetColormap, roundHalfEven, validateStroke, Stroke } from "../src/raster.js";
import { bitMismatches, loadFixtures } from "./fixtures.js";

// Small deterministic PRNG so failures reproduce.
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function randomMap(height: number, width: number, seed: number): Amap {
  const rng = mulberry32(seed);
  const values = new Float32Array(height * width);
  for (let i = 0; i < values.length; i++) values[i] = Math.fround(rng());
  return { height, width, values };
}

describe("AMAP binary codec", () => {
  it("round-trips random maps bit for bit", () => {
    for (const [h, w, seed] of [[1, 1, 1], [3, 7, 2], [16, 16, 3], [64, 64, 4]] as const) {
      const map = randomMap(h, w, seed);
      const back = decodeAmap(encodeAmap(map));
      expect(back.height).toBe(h);
      expect(back.width).toBe(w);
      expect(bitMismatches(back.values, map.values)).toEqual([]);
    }
  });

  it("round-trips through base64", () => {
    const map = randomMap(5, 9, 7);
    const back = decodeAmapBase64(encodeAmapBase64(map));
    expect(bitMismatches(back.values, map.values)).toEqual([]);
  });

  it("rejects truncated blobs with the service's message", () => {
    expect(() => decodeAmap(new Uint8Array(4))).toThrow(/AMAP blob truncated/);
  });

  it("rejects a wrong magic", () => {
    const blob = encodeAmap(randomMap(2, 2, 1));
    blob[0] = 0x58;
    expect(() => decodeAmap(blob)).toThrow(/bad AMAP magic at byte 0/);
  });

  it("rejects a payload whose size disagrees with the header", () => {
    const blob = encodeAmap(randomMap(2, 2, 1));
    expect(() => decodeAmap(blob.slice(0, blob.length - 4))).toThrow(
      /AMAP payload for 2x2 map must be 28 bytes/,
    );
  });

  it("decodes the maps served by the fixture service", () => {
    const fx = loadFixtures();
    const map = decodeAmapBase64(fx.sample_view.map_b64);
    expect([map.height, map.width]).toEqual(fx.sample_view.display_size);
    for (const v of map.values) {
      expect(v).toBeGreaterThanOrEqual(0);
      expect(v).toBeLessThanOrEqual(1);
    }
  });
});

describe("base64 helpers", () => {
  it("round-trips arbitrary bytes", () => {
    const rng = mulberry32(11);
    const bytes = new Uint8Array(999);
    for (let i = 0; i < bytes.length; i++) bytes[i] = Math.floor(rng() * 256);
    const back = base64ToBytes(bytesToBase64(bytes));
    expect(Array.from(back)).toEqual(Array.from(bytes));
  });
});

describe("netpbm decoding", () => {
  function pgmBytes(h: number, w: number, pixels: number[]): Uint8Array {
    const head = new TextEncoder().encode(`P5\n${w} ${h}\n255\n`);
    return new Uint8Array([...head, ...pixels]);
  }

  it("decodes a binary PGM", () => {
    const img = decodePgm(pgmBytes(2, 3, [0, 50, 100, 150, 200, 255]));
    expect(img.height).toBe(2);
    expect(img.width).toBe(3);
    expect(Array.from(img.pixels)).toEqual([0, 50, 100, 150, 200, 255]);
  });

  it("decodes a binary PPM", () => {
    const head = new TextEncoder().encode("P6\n1 2\n255\n");
    const img = decodePpm(new Uint8Array([...head, 1, 2, 3, 4, 5, 6]));
    expect(img.height).toBe(2);
    expect(img.width).toBe(1);
    expect(Array.from(img.pixels)).toEqual([1, 2, 3, 4, 5, 6]);
  });

  it("rejects the wrong magic for the requested format", () => {
    const head = new TextEncoder().encode("P6\n1 1\n255\n");
    expect(() => decodePgm(new Uint8Array([...head, 1, 2, 3]))).toThrow(/P5/);
  });

  it("rejects a short pixel payload", () => {
    expect(() => decodePgm(pgmBytes(2, 3, [1, 2, 3]))).toThrow(/PGM body has/);
  });
});

describe("u8 quantization", () => {
  it("rounds halves to even like the server", () => {
    expect(roundHalfEven(0.5)).toBe(0);
    expect(roundHalfEven(1.5)).toBe(2);
    expect(roundHalfEven(2.5)).toBe(2);
    expect(roundHalfEven(3.5)).toBe(4);
    expect(roundHalfEven(254.5)).toBe(254);
    expect(roundHalfEven(253.5)).toBe(254);
  });

  it("rounds non-ties to the nearest integer", () => {
    expect(roundHalfEven(0.49)).toBe(0);
    expect(roundHalfEven(0.51)).toBe(1);
    expect(roundHalfEven(127.999)).toBe(128);
    expect(roundHalfEven(128.001)).toBe(128);
  });
});

describe("jet colormap", () => {
  it("matches the ramp endpoints and midpoint", () => {
    expect(jetColormap(0)).toEqual([0, 0, 0.5]);
    expect(jetColormap(1)).toEqual([0.5, 0, 0]);
    expect(jetColormap(0.5)).toEqual([0.5, 1, 0.5]);
  });

  it("stays inside [0,1] on a fine sweep", () => {
    for (let i = 0; i <= 1000; i++) {
      for (const c of jetColormap(i / 1000)) {
        expect(c).toBeGreaterThanOrEqual(0);
        expect(c).toBeLessThanOrEqual(1);
      }
    }
  });
});

describe("stroke validation", () => {
  const ok: Stroke = { mode: "add", points: [[1, 1]], radius: 2, strength: 0.5 };

  it("accepts a well-formed stroke", () => {
    expect(() => validateStroke(ok, 8, 8)).not.toThrow();
  });

  it("rejects bad fields with the service's wording", () => {
    expect(() => validateStroke({ ...ok, mode: "blur" as "add" }, 8, 8)).toThrow(
      /mode must be add\|remove/,
    );
    expect(() => validateStroke({ ...ok, radius: 0.5 }, 8, 8)).toThrow(
      /radius must be >= 1/,
    );
    expect(() => validateStroke({ ...ok, strength: 0 }, 8, 8)).toThrow(
      /strength must lie in \(0,1\]/,
    );
    expect(() => validateStroke({ ...ok, points: [] }, 8, 8)).toThrow(/no points/);
    expect(() => validateStroke({ ...ok, points: [[9, 1]] }, 8, 8)).toThrow(
      /outside 8x8 display/,
    );
  });
});
