// Editor state: the working map, recorded strokes, and a strict undo/redo
// stack. Strokes are what get submitted (the server re-rasterizes them as
// the source of truth); the local preview uses the same falloff so both
// paths agree.

import { Amap, decodeAmapBase64, decodePgm, base64ToBytes, encodeAmapBase64 } from "./amap.js";
import { ApiClient, EditSession, SampleView, TopK } from "./api.js";
import { applyStroke, BrushMode, Stroke } from "./raster.js";

export const UNDO_LIMIT = 50; // stack is bounded; must stay >= 20

interface UndoEntry {
  map: Amap;
  // the stroke this entry precedes, so undo also un-records it
  stroke: Stroke | null;
}

function cloneMap(map: Amap): Amap {
  return { height: map.height, width: map.width, values: new Float32Array(map.values) };
}

export function rankOf(label: number, topk: TopK): number {
  const i = topk.labels.indexOf(label);
  return i === -1 ? topk.labels.length : i;
}

// True when the ground-truth class moved up the top-k after the edit.
export function gtRankImproved(label: number, before: TopK, after: TopK): boolean {
  return rankOf(label, after) < rankOf(label, before);
}

export class EditorState {
  readonly sampleId: string;
  readonly label: number;
  readonly height: number;
  readonly width: number;
  readonly imagePixels: Uint8Array;

  map: Amap;
  strokes: Stroke[] = [];
  mode: BrushMode = "add";
  radius = 8;
  strength = 0.6;
  alpha = 0.5; // display only; never touches the map payload

  sessionId: string | null = null;
  sessionCommitted = false;
  beforeTopk: TopK;
  afterTopk: TopK | null = null;
  submitting = false;
  lastError: string | null = null;

  private undoStack: UndoEntry[] = [];
  private redoStack: { map: Amap; stroke: Stroke | null }[] = [];

  constructor(view: SampleView) {
    this.sampleId = view.id;
    this.label = view.label;
    [this.height, this.width] = view.display_size;
    const pgm = decodePgm(base64ToBytes(view.image_b64));
    if (pgm.width !== this.width || pgm.height !== this.height) {
      throw new Error(`image is ${pgm.width}x${pgm.height}, display ${this.width}x${this.height}`);
    }
    this.imagePixels = pgm.pixels;
    this.map = decodeAmapBase64(view.map_b64);
    this.beforeTopk = view.topk;
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  get dirty(): boolean {
    return this.strokes.length > 0;
  }

  // One brush gesture: preview locally, record for submission, push undo.
  brushDrag(points: [number, number][]): Stroke {
    const stroke: Stroke = {
      mode: this.mode,
      points,
      radius: this.radius,
      strength: this.strength,
    };
    this.pushUndo(stroke);
    this.redoStack = []; // a new stroke invalidates redo
    this.map = applyStroke(this.map, stroke);
    this.strokes.push(stroke);
    return stroke;
  }

  private pushUndo(stroke: Stroke | null): void {
    this.undoStack.push({ map: cloneMap(this.map), stroke });
    if (this.undoStack.length > UNDO_LIMIT) {
      this.undoStack.shift();
    }
  }

  undo(): boolean {
    const entry = this.undoStack.pop();
    if (!entry) return false;
    this.redoStack.push({ map: this.map, stroke: entry.stroke });
    this.map = entry.map;
    if (entry.stroke !== null) {
      this.strokes.pop();
    }
    return true;
  }

  redo(): boolean {
    const entry = this.redoStack.pop();
    if (!entry) return false;
    this.undoStack.push({ map: cloneMap(this.map), stroke: entry.stroke });
    this.map = entry.map;
    if (entry.stroke !== null) {
      this.strokes.push(entry.stroke);
    }
    return true;
  }

  // POST the pending edit; on success adopt the server's rasterization and
  // top-k pair. On failure every piece of local state stays as it was.
  async submitAndRefresh(api: ApiClient): Promise<EditSession | null> {
    if (this.submitting) return null;
    this.submitting = true;
    try {
      // committed sessions are immutable; further edits open a new session
      const sessionId = this.sessionCommitted ? undefined : this.sessionId ?? undefined;
      const payload = this.strokes.length > 0
        ? { strokes: this.strokes }
        : { map_b64: encodeAmapBase64(this.map) };
      const session = await api.submitEdit(this.sampleId, payload, sessionId);
      this.sessionId = session.session_id;
      this.sessionCommitted = session.status === "committed";
      this.beforeTopk = session.before_topk;
      this.afterTopk = session.after_topk;
      this.map = decodeAmapBase64(session.edited_map_b64);
      this.strokes = [];
      this.undoStack = [];
      this.redoStack = [];
      this.lastError = null;
      return session;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      return null;
    } finally {
      this.submitting = false;
    }
  }

  async commit(api: ApiClient): Promise<boolean> {
    if (!this.sessionId || this.sessionCommitted) return false;
    try {
      const session = await api.commitSession(this.sessionId);
      this.sessionCommitted = session.status === "committed";
      this.lastError = null;
      return this.sessionCommitted;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      return false;
    }
  }

  gtImproved(): boolean | null {
    if (!this.afterTopk) return null;
    return gtRankImproved(this.label, this.beforeTopk, this.afterTopk);
  }
}
