// DOM wiring: canvas painting, pointer capture for brush drags, controls,
// and the before/after top-3 panel. All editing logic lives in state.ts;
// this file only reflects state onto the page.

import { ApiClient, SampleRow, TopK } from "./api.js";
import { renderOverlay } from "./raster.js";
import { EditorState, gtRankImproved } from "./state.js";

const SCALE = 6; // screen pixels per display cell

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function formatTopk(topk: TopK | null): string {
  if (!topk) return "-";
  return topk.labels
    .map((label, i) => `${label}: ${topk.probs[i].toFixed(3)}`)
    .join("\n");
}

export class EditorApp {
  private state: EditorState | null = null;
  private dragPoints: [number, number][] = [];
  private dragging = false;
  private pollTimer: number | null = null;

  private readonly canvas = el<HTMLCanvasElement>("canvas");
  private readonly ctx = this.canvas.getContext("2d")!;
  private readonly sampleSelect = el<HTMLSelectElement>("sample-select");
  private readonly modeButton = el<HTMLButtonElement>("mode");
  private readonly radiusInput = el<HTMLInputElement>("radius");
  private readonly strengthInput = el<HTMLInputElement>("strength");
  private readonly alphaInput = el<HTMLInputElement>("alpha");
  private readonly undoButton = el<HTMLButtonElement>("undo");
  private readonly redoButton = el<HTMLButtonElement>("redo");
  private readonly submitButton = el<HTMLButtonElement>("submit");
  private readonly commitButton = el<HTMLButtonElement>("commit");
  private readonly finetuneButton = el<HTMLButtonElement>("finetune");
  private readonly beforePre = el<HTMLPreElement>("before-topk");
  private readonly afterPre = el<HTMLPreElement>("after-topk");
  private readonly badge = el<HTMLSpanElement>("badge");
  private readonly status = el<HTMLParagraphElement>("status");

  constructor(private readonly api: ApiClient) {}

  async start(): Promise<void> {
    const listing = await this.api.listSamples();
    this.fillSampleList(listing.samples);
    this.sampleSelect.addEventListener("change", () => {
      void this.loadSample(this.sampleSelect.value);
    });
    this.wireControls();
    this.wireCanvas();
    this.wireKeyboard();
    if (listing.samples.length > 0) {
      const wrong = listing.samples.find((s) => !s.correct);
      await this.loadSample((wrong ?? listing.samples[0]).id);
    }
  }

  private fillSampleList(rows: SampleRow[]): void {
    this.sampleSelect.innerHTML = "";
    for (const row of rows) {
      const opt = document.createElement("option");
      opt.value = row.id;
      opt.textContent = `${row.id}  true ${row.label} / pred ${row.predicted}` +
        (row.correct ? "" : "  ✗");
      this.sampleSelect.appendChild(opt);
    }
  }

  private async loadSample(id: string): Promise<void> {
    const view = await this.api.getSample(id);
    this.state = new EditorState(view);
    this.sampleSelect.value = id;
    this.canvas.width = this.state.width * SCALE;
    this.canvas.height = this.state.height * SCALE;
    this.syncControls();
    this.repaint();
  }

  private wireControls(): void {
    this.modeButton.addEventListener("click", () => this.toggleMode());
    this.radiusInput.addEventListener("input", () => {
      if (this.state) this.state.radius = Number(this.radiusInput.value);
    });
    this.strengthInput.addEventListener("input", () => {
      if (this.state) this.state.strength = Number(this.strengthInput.value);
    });
    this.alphaInput.addEventListener("input", () => {
      if (this.state) {
        this.state.alpha = Number(this.alphaInput.value);
        this.repaint(); // view-only: the map payload is untouched
      }
    });
    this.undoButton.addEventListener("click", () => {
      if (this.state?.undo()) this.repaint();
    });
    this.redoButton.addEventListener("click", () => {
      if (this.state?.redo()) this.repaint();
    });
    this.submitButton.addEventListener("click", () => void this.submit());
    this.commitButton.addEventListener("click", () => void this.commit());
    this.finetuneButton.addEventListener("click", () => void this.finetune());
  }

  private toggleMode(): void {
    if (!this.state) return;
    this.state.mode = this.state.mode === "add" ? "remove" : "add";
    this.syncControls();
  }

  private wireKeyboard(): void {
    document.addEventListener("keydown", (ev) => {
      if (!this.state) return;
      if (ev.key === "a" || ev.key === "r") {
        this.state.mode = ev.key === "a" ? "add" : "remove";
        this.syncControls();
      } else if (ev.key === "[") {
        this.state.radius = Math.max(1, this.state.radius - 1);
        this.syncControls();
      } else if (ev.key === "]") {
        this.state.radius = Math.min(32, this.state.radius + 1);
        this.syncControls();
      } else if (ev.key === "z" && (ev.ctrlKey || ev.metaKey)) {
        ev.preventDefault();
        if (ev.shiftKey ? this.state.redo() : this.state.undo()) this.repaint();
      }
    });
  }

  private canvasPoint(ev: PointerEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * this.canvas.width / SCALE;
    const y = ((ev.clientY - rect.top) / rect.height) * this.canvas.height / SCALE;
    const clamp = (v: number, hi: number) => Math.min(Math.max(v, 0), hi - 1);
    return [clamp(x, this.state!.width), clamp(y, this.state!.height)];
  }

  private wireCanvas(): void {
    this.canvas.addEventListener("pointerdown", (ev) => {
      if (!this.state || this.state.submitting) return;
      this.canvas.setPointerCapture(ev.pointerId);
      this.dragging = true;
      this.dragPoints = [this.canvasPoint(ev)];
    });
    this.canvas.addEventListener("pointermove", (ev) => {
      if (!this.dragging || !this.state) return;
      this.dragPoints.push(this.canvasPoint(ev));
    });
    const finish = () => {
      if (!this.dragging || !this.state) return;
      this.dragging = false;
      if (this.dragPoints.length > 0) {
        this.state.brushDrag(this.dragPoints);
        this.dragPoints = [];
        this.repaint();
      }
    };
    this.canvas.addEventListener("pointerup", finish);
    this.canvas.addEventListener("pointercancel", finish);
  }

  private async submit(): Promise<void> {
    if (!this.state || this.state.submitting) return;
    this.submitButton.disabled = true; // no concurrent submits
    try {
      const session = await this.state.submitAndRefresh(this.api);
      this.status.textContent = session
        ? `session ${session.session_id} (${session.status})`
        : `error: ${this.state.lastError}`;
    } finally {
      this.submitButton.disabled = false;
      this.syncControls();
      this.repaint();
    }
  }

  private async commit(): Promise<void> {
    if (!this.state) return;
    const ok = await this.state.commit(this.api);
    this.status.textContent = ok
      ? `session ${this.state.sessionId} committed`
      : `error: ${this.state.lastError ?? "nothing to commit"}`;
    this.syncControls();
  }

  private async finetune(): Promise<void> {
    try {
      const job = await this.api.startFinetune({});
      this.status.textContent = `job ${job.job_id}: ${job.state}`;
      this.pollJob(job.job_id);
    } catch (err) {
      this.status.textContent = `error: ${err instanceof Error ? err.message : err}`;
    }
  }

  private pollJob(jobId: string): void {
    if (this.pollTimer !== null) window.clearInterval(this.pollTimer);
    this.pollTimer = window.setInterval(async () => {
      const job = await this.api.getJob(jobId);
      this.status.textContent = `job ${job.job_id}: ${job.state}` +
        (job.metrics ? ` acc ${job.metrics.accuracy_before?.toFixed(3)} -> ` +
          `${job.metrics.accuracy_after?.toFixed(3)}` : "");
      if (job.state === "done" || job.state === "failed") {
        window.clearInterval(this.pollTimer!);
        this.pollTimer = null;
        if (this.state) await this.loadSample(this.state.sampleId);
      }
    }, 500);
  }

  private syncControls(): void {
    if (!this.state) return;
    this.modeButton.textContent = `mode: ${this.state.mode}`;
    this.radiusInput.value = String(this.state.radius);
    this.strengthInput.value = String(this.state.strength);
    this.alphaInput.value = String(this.state.alpha);
    this.commitButton.disabled = !this.state.sessionId || this.state.sessionCommitted;
  }

  private repaint(): void {
    if (!this.state) return;
    const { width, height } = this.state;
    const rgb = renderOverlay(this.state.imagePixels, this.state.map, this.state.alpha);
    const img = this.ctx.createImageData(width, height);
    for (let i = 0; i < width * height; i++) {
      img.data[4 * i] = rgb[3 * i];
      img.data[4 * i + 1] = rgb[3 * i + 1];
      img.data[4 * i + 2] = rgb[3 * i + 2];
      img.data[4 * i + 3] = 255;
    }
    // draw at cell resolution, then scale up without smoothing
    const off = document.createElement("canvas");
    off.width = width;
    off.height = height;
    off.getContext("2d")!.putImageData(img, 0, 0);
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    this.ctx.drawImage(off, 0, 0, this.canvas.width, this.canvas.height);

    this.beforePre.textContent = formatTopk(this.state.beforeTopk);
    this.afterPre.textContent = formatTopk(this.state.afterTopk);
    const improved = this.state.gtImproved();
    this.badge.textContent = improved === null ? "" : improved ? "GT rank improved" : "GT rank unchanged";
    this.badge.className = improved ? "badge good" : "badge";
    this.undoButton.disabled = !this.state.canUndo;
    this.redoButton.disabled = !this.state.canRedo;
  }
}

export { gtRankImproved };
