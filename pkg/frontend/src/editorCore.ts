// Mask editing state: a binary layer plus snapshot-based undo/redo.
//
// All rasterization is integer arithmetic on pixel centers so a scripted
// action sequence produces identical bytes everywhere — the round-trip
// guarantee (export → PNG → import is bitwise) starts here.

import { MaskLayer } from "./maskCodec.js";

export type Tool = "brush" | "eraser" | "polygon" | "flood-fill";

export interface Point {
  x: number;
  y: number;
}

const HISTORY_LIMIT = 64;

export class MaskEditor {
  readonly width: number;
  readonly height: number;
  private layer: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private redoStack: Uint8Array[] = [];

  constructor(width: number, height: number, initial?: Uint8Array) {
    if (width <= 0 || height <= 0) {
      throw new Error(`bad editor size ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.layer = new Uint8Array(width * height);
    if (initial) {
      if (initial.length !== width * height) {
        throw new Error(
          `initial layer is ${initial.length} bytes, expected ${width * height}`,
        );
      }
      for (let i = 0; i < initial.length; i++) {
        this.layer[i] = initial[i] ? 1 : 0;
      }
    }
  }

  static fromLayer(mask: MaskLayer): MaskEditor {
    return new MaskEditor(mask.width, mask.height, mask.data);
  }

  /** A defensive copy of the current binary layer. */
  snapshot(): Uint8Array {
    return this.layer.slice();
  }

  exportLayer(): MaskLayer {
    return { width: this.width, height: this.height, data: this.snapshot() };
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  private checkpoint() {
    this.undoStack.push(this.layer.slice());
    if (this.undoStack.length > HISTORY_LIMIT) this.undoStack.shift();
    this.redoStack.length = 0;
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.redoStack.push(this.layer);
    this.layer = prev;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(this.layer);
    this.layer = next;
    return true;
  }

  /** Replace the whole layer (mask import); recorded as one undoable action. */
  setLayer(mask: MaskLayer) {
    if (mask.width !== this.width || mask.height !== this.height) {
      throw new Error(
        `mask is ${mask.width}x${mask.height}, editor is ${this.width}x${this.height}`,
      );
    }
    this.checkpoint();
    for (let i = 0; i < mask.data.length; i++) {
      this.layer[i] = mask.data[i] ? 1 : 0;
    }
  }

  fillAll(value: 0 | 1) {
    this.checkpoint();
    this.layer.fill(value);
  }

  private stamp(cx: number, cy: number, radius: number, value: 0 | 1) {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.ceil(cx - radius));
    const x1 = Math.min(this.width - 1, Math.floor(cx + radius));
    const y0 = Math.max(0, Math.ceil(cy - radius));
    const y1 = Math.min(this.height - 1, Math.floor(cy + radius));
    for (let y = y0; y <= y1; y++) {
      const dy = y - cy;
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        if (dx * dx + dy * dy <= r2) {
          this.layer[y * this.width + x] = value;
        }
      }
    }
  }

  /**
   * Stamp a circular brush along a polyline.  `value` 1 paints, 0 erases;
   * a single point is a dab.
   */
  applyStroke(points: Point[], radius: number, value: 0 | 1) {
    if (points.length === 0) return;
    if (radius < 0) throw new Error(`negative brush radius ${radius}`);
    this.checkpoint();
    let [prev] = points;
    this.stamp(Math.round(prev.x), Math.round(prev.y), radius, value);
    for (let i = 1; i < points.length; i++) {
      const next = points[i];
      const span = Math.max(Math.abs(next.x - prev.x), Math.abs(next.y - prev.y));
      const steps = Math.max(1, Math.ceil(span * 2));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stamp(
          Math.round(prev.x + (next.x - prev.x) * t),
          Math.round(prev.y + (next.y - prev.y) * t),
          radius, value);
      }
      prev = next;
    }
  }

  /** Even-odd scanline fill of a closed polygon, sampled at pixel centers. */
  applyPolygon(points: Point[], value: 0 | 1) {
    if (points.length < 3) {
      throw new Error(`polygon needs at least 3 points, got ${points.length}`);
    }
    this.checkpoint();
    const n = points.length;
    for (let y = 0; y < this.height; y++) {
      const cy = y + 0.5;
      const crossings: number[] = [];
      for (let i = 0; i < n; i++) {
        const a = points[i];
        const b = points[(i + 1) % n];
        if (a.y === b.y) continue;
        const [lo, hi] = a.y < b.y ? [a, b] : [b, a];
        if (cy < lo.y || cy >= hi.y) continue;
        crossings.push(lo.x + ((cy - lo.y) / (hi.y - lo.y)) * (hi.x - lo.x));
      }
      crossings.sort((p, q) => p - q);
      for (let k = 0; k + 1 < crossings.length; k += 2) {
        const x0 = Math.max(0, Math.ceil(crossings[k] - 0.5));
        const x1 = Math.min(this.width - 1, Math.floor(crossings[k + 1] - 0.5));
        for (let x = x0; x <= x1; x++) {
          this.layer[y * this.width + x] = value;
        }
      }
    }
  }

  /** 4-connected flood fill from a seed pixel. */
  applyFill(seedX: number, seedY: number, value: 0 | 1) {
    const x = Math.round(seedX);
    const y = Math.round(seedY);
    if (x < 0 || x >= this.width || y < 0 || y >= this.height) {
      throw new Error(`fill seed (${x}, ${y}) is outside the canvas`);
    }
    const target = this.layer[y * this.width + x];
    if (target === value) return;
    this.checkpoint();
    const queue = [y * this.width + x];
    this.layer[queue[0]] = value;
    while (queue.length > 0) {
      const at = queue.pop()!;
      const ax = at % this.width;
      const neighbors = [
        ax > 0 ? at - 1 : -1,
        ax < this.width - 1 ? at + 1 : -1,
        at - this.width,
        at + this.width,
      ];
      for (const next of neighbors) {
        if (next >= 0 && next < this.layer.length && this.layer[next] === target) {
          this.layer[next] = value;
          queue.push(next);
        }
      }
    }
  }

  /** Foreground pixel count — handy for enabling/disabling the run control. */
  area(): number {
    let total = 0;
    for (let i = 0; i < this.layer.length; i++) total += this.layer[i];
    return total;
  }
}
