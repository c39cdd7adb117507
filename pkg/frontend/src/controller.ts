// DOM-free editing-session flow: everything the page does except pixels on
// screen.  Keeping this separate from app.ts lets the contract suite drive
// the exact state machine the UI uses — same client, same promotion rules,
// same guards — headlessly.

import { StudioClient, DiagnosticsPayload, ManipulateResponse } from "./apiClient.js";
import { MaskEditor } from "./editorCore.js";
import { decodeMaskPng } from "./maskCodec.js";
import { fromBase64 } from "./base64.js";

export interface HistoryEntry {
  step: number;
  imagePng: Uint8Array;
  maskPng: Uint8Array; // the service's estimate of where the region landed
}

export class StudioSession {
  readonly editor: MaskEditor;
  /** Current working exemplar as PNG bytes (promoted after each edit). */
  exemplarPng: Uint8Array;
  /** Exemplar before the latest edit — the "before" half of the slider. */
  previousExemplarPng: Uint8Array | null = null;
  history: HistoryEntry[] = [];
  lastDiagnostics: DiagnosticsPayload | null = null;
  busy = false;

  private constructor(
    private client: StudioClient,
    readonly id: string,
    readonly width: number,
    readonly height: number,
    exemplarPng: Uint8Array,
    maskPng: Uint8Array,
  ) {
    this.exemplarPng = exemplarPng;
    this.editor = MaskEditor.fromLayer(decodeMaskPng(maskPng));
  }

  /**
   * Create a service session from exemplar bytes and build the local state
   * around it.  The server owns resizing and auto-masking, so the working
   * exemplar is re-fetched rather than trusted from the upload.
   */
  static async start(client: StudioClient, exemplarPng: Uint8Array, opts: {
    maskPng?: Uint8Array;
    resolution?: number;
  } = {}): Promise<StudioSession> {
    const created = await client.createSession(exemplarPng, opts);
    const info = await client.getSession(created.id);
    return new StudioSession(
      client, created.id, created.width, created.height,
      fromBase64(info.exemplar), fromBase64(created.mask));
  }

  /** History length as known locally; the server is the source of truth. */
  get steps(): number {
    return this.history.length;
  }

  /**
   * One manipulation round trip: export the editor's layer, run it, promote
   * the result to the new working exemplar ("continue editing" semantics).
   * Rejects reentrant calls — the page disables the run control while busy.
   */
  async runManipulation(opts: { diagnostics?: boolean } = {}): Promise<ManipulateResponse> {
    if (this.busy) throw new Error("a manipulation is already in flight");
    if (this.editor.area() === 0) {
      throw new Error("the mask is empty — paint a region first");
    }
    this.busy = true;
    try {
      const resp = await this.client.manipulate(
        this.id, this.editor.exportLayer(),
        { width: this.width, height: this.height },
        { diagnostics: opts.diagnostics });
      const imagePng = fromBase64(resp.image);
      this.history.push({
        step: resp.step,
        imagePng,
        maskPng: fromBase64(resp.mask),
      });
      this.previousExemplarPng = this.exemplarPng;
      this.exemplarPng = imagePng;
      this.lastDiagnostics = resp.diagnostics;
      return resp;
    } finally {
      this.busy = false;
    }
  }

  /** Server-side undo; local exemplar and mask follow the restored step. */
  async undoEdit(): Promise<void> {
    if (this.busy) throw new Error("a manipulation is already in flight");
    this.busy = true;
    try {
      const resp = await this.client.undo(this.id);
      this.exemplarPng = fromBase64(resp.exemplar);
      this.previousExemplarPng = null;
      this.editor.setLayer(decodeMaskPng(fromBase64(resp.mask)));
      this.history.pop();
      this.lastDiagnostics = null;
    } finally {
      this.busy = false;
    }
  }

  /** Replace the exemplar mask via upload / segmenter prompt / re-auto. */
  async refreshMask(opts: { maskPng?: Uint8Array; prompt?: unknown } = {}): Promise<void> {
    const mask = await this.client.setMask(this.id, opts);
    this.editor.setLayer(decodeMaskPng(fromBase64(mask)));
  }
}
