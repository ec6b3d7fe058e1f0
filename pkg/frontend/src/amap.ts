// AMAP binary codec: "AMAP" magic, u32 LE height, u32 LE width, f32 LE cells.
// Byte-compatible with the service; maps travel base64-encoded in JSON.

const MAGIC = [0x41, 0x4d, 0x41, 0x50]; // "AMAP"

export interface Amap {
  height: number;
  width: number;
  values: Float32Array; // row-major, length height * width
}

export function encodeAmap(map: Amap): Uint8Array {
  if (map.values.length !== map.height * map.width) {
    throw new Error(
      `map carries ${map.values.length} cells for ${map.height}x${map.width}`,
    );
  }
  const out = new Uint8Array(12 + 4 * map.values.length);
  const view = new DataView(out.buffer);
  MAGIC.forEach((b, i) => (out[i] = b));
  view.setUint32(4, map.height, true);
  view.setUint32(8, map.width, true);
  for (let i = 0; i < map.values.length; i++) {
    view.setFloat32(12 + 4 * i, map.values[i], true);
  }
  return out;
}

export function decodeAmap(blob: Uint8Array): Amap {
  if (blob.length < 12) {
    throw new Error(`AMAP blob truncated: ${blob.length} bytes, header needs 12`);
  }
  if (!MAGIC.every((b, i) => blob[i] === b)) {
    throw new Error("bad AMAP magic at byte 0");
  }
  const view = new DataView(blob.buffer, blob.byteOffset, blob.byteLength);
  const height = view.getUint32(4, true);
  const width = view.getUint32(8, true);
  const expected = 12 + 4 * height * width;
  if (blob.length !== expected) {
    throw new Error(
      `AMAP payload for ${height}x${width} map must be ${expected} bytes, ` +
        `got ${blob.length}`,
    );
  }
  const values = new Float32Array(height * width);
  for (let i = 0; i < values.length; i++) {
    values[i] = view.getFloat32(12 + 4 * i, true);
  }
  return { height, width, values };
}

// base64 helpers that work in both browser and node without Buffer types

export function bytesToBase64(bytes: Uint8Array): string {
  let bin = "";
  for (let i = 0; i < bytes.length; i++) {
    bin += String.fromCharCode(bytes[i]);
  }
  return btoa(bin);
}

export function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) {
    out[i] = bin.charCodeAt(i);
  }
  return out;
}

export function decodeAmapBase64(b64: string): Amap {
  return decodeAmap(base64ToBytes(b64));
}

export function encodeAmapBase64(map: Amap): string {
  return bytesToBase64(encodeAmap(map));
}

// Binary PGM (P5) / PPM (P6) with maxval 255, as the service emits them.

function parseHeader(bytes: Uint8Array, magic: string): {
  width: number;
  height: number;
  offset: number;
} {
  const text = new TextDecoder("latin1").decode(bytes.slice(0, 64));
  const m = text.match(/^(P[56])\n(\d+) (\d+)\n255\n/);
  if (!m || m[1] !== magic) {
    throw new Error(`expected ${magic} header, got ${JSON.stringify(text.slice(0, 16))}`);
  }
  return { width: Number(m[2]), height: Number(m[3]), offset: m[0].length };
}

export function decodePgm(bytes: Uint8Array): {
  width: number;
  height: number;
  pixels: Uint8Array;
} {
  const { width, height, offset } = parseHeader(bytes, "P5");
  const pixels = bytes.slice(offset, offset + width * height);
  if (pixels.length !== width * height) {
    throw new Error(`PGM body has ${pixels.length} bytes for ${width}x${height}`);
  }
  return { width, height, pixels };
}

export function decodePpm(bytes: Uint8Array): {
  width: number;
  height: number;
  pixels: Uint8Array; // RGB triples
} {
  const { width, height, offset } = parseHeader(bytes, "P6");
  const pixels = bytes.slice(offset, offset + width * height * 3);
  if (pixels.length !== width * height * 3) {
    throw new Error(`PPM body has ${pixels.length} bytes for ${width}x${height}`);
  }
  return { width, height, pixels };
}
