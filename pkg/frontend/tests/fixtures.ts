// Loads the golden service fixtures recorded by tools/record_fixtures.py.
// Everything in the file is a raw HTTP response body from the real service,
// so comparisons against it are comparisons against the server.

import { readFileSync } from "node:fs";
import { EditSession, FinetuneJob, HealthInfo, SampleRow, SampleView } from "../src/api.js";
import { Stroke } from "../src/raster.js";

export interface RecordedSequence {
  name: string;
  sample_id: string;
  strokes: Stroke[];
  response: EditSession;
}

export interface Fixtures {
  display_size: [number, number];
  health: HealthInfo;
  samples: { samples: SampleRow[]; count: number };
  sample_view: SampleView;
  unchanged_submit: EditSession;
  stroke_sequences: RecordedSequence[];
  commit: EditSession;
  finetune_start: FinetuneJob;
  finetune_done: FinetuneJob;
}

export function loadFixtures(): Fixtures {
  const path = new URL("../fixtures/service_fixtures.json", import.meta.url);
  return JSON.parse(readFileSync(path, "utf8")) as Fixtures;
}

// Indices where two float32 rasters differ in bit pattern (first `cap`).
export function bitMismatches(a: Float32Array, b: Float32Array, cap = 5): number[] {
  if (a.length !== b.length) {
    throw new Error(`length mismatch: ${a.length} vs ${b.length}`);
  }
  const ua = new Uint32Array(a.buffer, a.byteOffset, a.length);
  const ub = new Uint32Array(b.buffer, b.byteOffset, b.length);
  const bad: number[] = [];
  for (let i = 0; i < ua.length && bad.length < cap; i++) {
    if (ua[i] !== ub[i]) bad.push(i);
  }
  return bad;
}
