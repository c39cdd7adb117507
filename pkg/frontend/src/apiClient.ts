// Typed client for the editing service's HTTP/JSON API.
//
// Responses are validated field-by-field before they reach UI code; the
// validators are hand-rolled so the shipped bundle stays dependency-free
// (the vitest contract suite re-checks the same wire shapes independently
// with zod).  All PNG payloads travel base64-encoded inside JSON.

import { MaskLayer, encodeMaskPng } from "./maskCodec.js";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export interface SessionCreated {
  id: string;
  mask: string;
  width: number;
  height: number;
}

export interface SessionInfo {
  id: string;
  width: number;
  height: number;
  history_length: number;
  exemplar: string;
  mask: string;
  created: number;
  updated: number;
}

export interface DiagnosticsPayload {
  source_keypoints: number[][];
  driver_keypoints: number[][];
  attention: string[];
  fused_field: string;
  degenerate: boolean[];
}

export interface ManipulateResponse {
  image: string;
  mask: string;
  step: number;
  width: number;
  height: number;
  binarized_input: boolean;
  diagnostics: DiagnosticsPayload | null;
}

export interface UndoResponse {
  history_length: number;
  exemplar: string;
  mask: string;
}

export interface HealthResponse {
  status: string;
  num_keypoints: number;
  internal_resolution: number;
  checkpoint_step: number;
}

// --- response shape guards --------------------------------------------------

function field(obj: unknown, key: string): unknown {
  if (typeof obj !== "object" || obj === null) {
    throw new Error(`expected an object around field "${key}"`);
  }
  return (obj as Record<string, unknown>)[key];
}

function str(obj: unknown, key: string): string {
  const v = field(obj, key);
  if (typeof v !== "string") throw new Error(`field "${key}" is not a string`);
  return v;
}

function num(obj: unknown, key: string): number {
  const v = field(obj, key);
  if (typeof v !== "number" || Number.isNaN(v)) {
    throw new Error(`field "${key}" is not a number`);
  }
  return v;
}

function bool(obj: unknown, key: string): boolean {
  const v = field(obj, key);
  if (typeof v !== "boolean") throw new Error(`field "${key}" is not a boolean`);
  return v;
}

function parseDiagnostics(raw: unknown): DiagnosticsPayload | null {
  if (raw === null || raw === undefined) return null;
  const keypoints = (key: string) => {
    const v = field(raw, key);
    if (!Array.isArray(v) || v.some((p) =>
        !Array.isArray(p) || p.length !== 2 || p.some((c) => typeof c !== "number"))) {
      throw new Error(`field "${key}" is not a list of [x, y] pairs`);
    }
    return v as number[][];
  };
  const attention = field(raw, "attention");
  if (!Array.isArray(attention) || attention.some((s) => typeof s !== "string")) {
    throw new Error('field "attention" is not a list of base64 strings');
  }
  const degenerate = field(raw, "degenerate");
  if (!Array.isArray(degenerate) || degenerate.some((b) => typeof b !== "boolean")) {
    throw new Error('field "degenerate" is not a list of booleans');
  }
  return {
    source_keypoints: keypoints("source_keypoints"),
    driver_keypoints: keypoints("driver_keypoints"),
    attention: attention as string[],
    fused_field: str(raw, "fused_field"),
    degenerate: degenerate as boolean[],
  };
}

// --- client ------------------------------------------------------------------

export interface ManipulateOptions {
  diagnostics?: boolean;
  resolution?: number;
}

export class StudioClient {
  private baseUrl: string;
  private fetchImpl: typeof fetch;

  constructor(baseUrl = "", fetchImpl?: typeof fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? fetch.bind(globalThis);
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    let body: unknown = null;
    try {
      body = await resp.json();
    } catch {
      // non-JSON error bodies fall through with a generic detail
    }
    if (!resp.ok) {
      const detail = body === null ? resp.statusText : field(body, "detail");
      throw new ApiError(
        resp.status,
        typeof detail === "string" ? detail : JSON.stringify(detail),
      );
    }
    return body;
  }

  private static pngPart(form: FormData, name: string, bytes: Uint8Array) {
    // copy into a fresh buffer: Blob wants a non-shared ArrayBuffer view
    const part = new Uint8Array(bytes);
    form.append(name, new Blob([part], { type: "image/png" }), `${name}.png`);
  }

  async health(): Promise<HealthResponse> {
    const body = await this.request("/healthz");
    return {
      status: str(body, "status"),
      num_keypoints: num(body, "num_keypoints"),
      internal_resolution: num(body, "internal_resolution"),
      checkpoint_step: num(body, "checkpoint_step"),
    };
  }

  async createSession(exemplarPng: Uint8Array, opts: {
    maskPng?: Uint8Array;
    resolution?: number;
  } = {}): Promise<SessionCreated> {
    const form = new FormData();
    StudioClient.pngPart(form, "exemplar", exemplarPng);
    if (opts.maskPng) StudioClient.pngPart(form, "mask", opts.maskPng);
    if (opts.resolution !== undefined) {
      form.append("resolution", String(opts.resolution));
    }
    const body = await this.request("/sessions", { method: "POST", body: form });
    return {
      id: str(body, "id"),
      mask: str(body, "mask"),
      width: num(body, "width"),
      height: num(body, "height"),
    };
  }

  async getSession(id: string): Promise<SessionInfo> {
    const body = await this.request(`/sessions/${encodeURIComponent(id)}`);
    return {
      id: str(body, "id"),
      width: num(body, "width"),
      height: num(body, "height"),
      history_length: num(body, "history_length"),
      exemplar: str(body, "exemplar"),
      mask: str(body, "mask"),
      created: num(body, "created"),
      updated: num(body, "updated"),
    };
  }

  /**
   * Replace the session's exemplar mask: upload PNG bytes, forward a
   * segmenter prompt, or pass nothing to re-run auto-masking server-side.
   */
  async setMask(id: string, opts: {
    maskPng?: Uint8Array;
    prompt?: unknown;
  } = {}): Promise<string> {
    const form = new FormData();
    if (opts.maskPng) StudioClient.pngPart(form, "mask", opts.maskPng);
    else if (opts.prompt !== undefined) {
      form.append("prompt", JSON.stringify(opts.prompt));
    }
    const body = await this.request(
      `/sessions/${encodeURIComponent(id)}/mask`, { method: "POST", body: form });
    return str(body, "mask");
  }

  /**
   * Run one manipulation step with the editor's layer as the edited mask.
   * The layer is validated locally first: it must be strictly binary and
   * match the session's resolution — the UI never ships a malformed mask.
   */
  async manipulate(id: string, layer: MaskLayer, session: {
    width: number;
    height: number;
  }, opts: ManipulateOptions = {}): Promise<ManipulateResponse> {
    if (layer.width !== session.width || layer.height !== session.height) {
      throw new Error(
        `mask is ${layer.width}x${layer.height} but the session works at ` +
        `${session.width}x${session.height}`,
      );
    }
    const maskPng = encodeMaskPng(layer); // throws on non-binary layers
    const form = new FormData();
    StudioClient.pngPart(form, "mask", maskPng);
    if (opts.diagnostics) form.append("return_diagnostics", "true");
    if (opts.resolution !== undefined) {
      form.append("resolution", String(opts.resolution));
    }
    const body = await this.request(
      `/sessions/${encodeURIComponent(id)}/manipulate`,
      { method: "POST", body: form });
    return {
      image: str(body, "image"),
      mask: str(body, "mask"),
      step: num(body, "step"),
      width: num(body, "width"),
      height: num(body, "height"),
      binarized_input: bool(body, "binarized_input"),
      diagnostics: parseDiagnostics(field(body, "diagnostics")),
    };
  }

  async undo(id: string): Promise<UndoResponse> {
    const body = await this.request(
      `/sessions/${encodeURIComponent(id)}/undo`, { method: "POST" });
    return {
      history_length: num(body, "history_length"),
      exemplar: str(body, "exemplar"),
      mask: str(body, "mask"),
    };
  }
}
