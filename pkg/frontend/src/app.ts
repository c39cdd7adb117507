// Browser shell for the mask studio: the canvas stack, the toolbar, and the
// glue into StudioSession.  Everything stateful about editing lives in
// editorCore/controller (which the test suite drives headlessly) — this file
// only translates pointer/keyboard events into those calls and paints the
// results.

import { StudioClient, ApiError } from "./apiClient.js";
import { StudioSession } from "./controller.js";
import { Tool, Point } from "./editorCore.js";

const TOOLS: Tool[] = ["brush", "eraser", "polygon", "flood-fill"];
const KEYPOINT_COLORS = [
  "#ff5f5f", "#ffd166", "#06d6a0", "#4cc9f0",
  "#b388ff", "#f78c6b", "#83d483", "#f06292",
];

// --- tiny DOM helpers --------------------------------------------------------

function must<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id} in index.html`);
  return el as T;
}

function context2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D {
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas context unavailable");
  return ctx;
}

function pngBlobUrl(bytes: Uint8Array): string {
  const copy = new Uint8Array(bytes); // fresh buffer keeps Blob typing happy
  return URL.createObjectURL(new Blob([copy], { type: "image/png" }));
}

/** Decode PNG bytes through the browser and draw them over the whole canvas. */
async function drawPng(ctx: CanvasRenderingContext2D, bytes: Uint8Array): Promise<void> {
  const url = pngBlobUrl(bytes);
  try {
    const img = new Image();
    img.src = url;
    await img.decode();
    ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
    ctx.drawImage(img, 0, 0, ctx.canvas.width, ctx.canvas.height);
  } finally {
    URL.revokeObjectURL(url);
  }
}

// --- elements ----------------------------------------------------------------

const els = {
  health: must<HTMLSpanElement>("health"),
  setup: must<HTMLElement>("setup"),
  exemplarFile: must<HTMLInputElement>("exemplarFile"),
  maskFile: must<HTMLInputElement>("maskFile"),
  resolution: must<HTMLInputElement>("resolution"),
  startBtn: must<HTMLButtonElement>("startBtn"),
  studio: must<HTMLElement>("studio"),
  sessionMeta: must<HTMLSpanElement>("sessionMeta"),
  radius: must<HTMLInputElement>("radius"),
  radiusOut: must<HTMLSpanElement>("radiusOut"),
  zoom: must<HTMLSelectElement>("zoom"),
  undoBtn: must<HTMLButtonElement>("undoBtn"),
  redoBtn: must<HTMLButtonElement>("redoBtn"),
  clearBtn: must<HTMLButtonElement>("clearBtn"),
  autoMaskBtn: must<HTMLButtonElement>("autoMaskBtn"),
  diagToggle: must<HTMLInputElement>("diagToggle"),
  runBtn: must<HTMLButtonElement>("runBtn"),
  serverUndoBtn: must<HTMLButtonElement>("serverUndoBtn"),
  canvasWrap: must<HTMLDivElement>("canvasWrap"),
  imageCanvas: must<HTMLCanvasElement>("imageCanvas"),
  maskCanvas: must<HTMLCanvasElement>("maskCanvas"),
  overlayCanvas: must<HTMLCanvasElement>("overlayCanvas"),
  comparePanel: must<HTMLElement>("comparePanel"),
  compareWrap: must<HTMLDivElement>("compareWrap"),
  afterImg: must<HTMLImageElement>("afterImg"),
  beforeClip: must<HTMLDivElement>("beforeClip"),
  beforeImg: must<HTMLImageElement>("beforeImg"),
  compareSlider: must<HTMLInputElement>("compareSlider"),
  historyList: must<HTMLOListElement>("historyList"),
  diagPanel: must<HTMLElement>("diagPanel"),
  diagFlags: must<HTMLParagraphElement>("diagFlags"),
  diagPreviews: must<HTMLDivElement>("diagPreviews"),
  statusLine: must<HTMLDivElement>("statusLine"),
};

const imageCtx = context2d(els.imageCanvas);
const maskCtx = context2d(els.maskCanvas);
const overlayCtx = context2d(els.overlayCanvas);

// --- state -------------------------------------------------------------------

const client = new StudioClient("");
let session: StudioSession | null = null;
let tool: Tool = "brush";
let radius = 4;
let zoom = 4;
let strokePts: Point[] | null = null; // in-flight brush/eraser gesture
let polygonPts: Point[] = [];         // pending polygon vertices
let hoverPt: Point | null = null;
let compareUrls: string[] = [];
let historyUrls: string[] = [];

function setStatus(text: string, isError = false) {
  els.statusLine.textContent = text;
  els.statusLine.className = isError ? "error" : "";
}

function showError(err: unknown) {
  if (err instanceof ApiError) {
    setStatus(`HTTP ${err.status}: ${err.detail}`, true);
  } else {
    setStatus(err instanceof Error ? err.message : String(err), true);
  }
}

// --- canvas stack ------------------------------------------------------------

function sizeCanvases() {
  if (!session) return;
  for (const c of [els.imageCanvas, els.maskCanvas, els.overlayCanvas]) {
    c.width = session.width;
    c.height = session.height;
  }
  applyZoom();
}

function applyZoom() {
  if (!session) return;
  const w = `${session.width * zoom}px`;
  const h = `${session.height * zoom}px`;
  for (const c of [els.imageCanvas, els.maskCanvas, els.overlayCanvas]) {
    c.style.width = w;
    c.style.height = h;
  }
  els.canvasWrap.style.width = w;
  els.canvasWrap.style.height = h;
}

async function drawExemplar() {
  if (session) await drawPng(imageCtx, session.exemplarPng);
}

function paintMask() {
  if (!session) return;
  const editor = session.editor;
  const image = new ImageData(editor.width, editor.height);
  const layer = editor.snapshot();
  for (let i = 0; i < layer.length; i++) {
    if (layer[i]) {
      const o = i * 4;
      image.data[o] = 255;
      image.data[o + 1] = 61;
      image.data[o + 2] = 113;
      image.data[o + 3] = 150;
    }
  }
  maskCtx.putImageData(image, 0, 0);
  updateButtons();
}

/** Preview layer: hover cursor, gesture-in-progress, diagnostic keypoints. */
function redrawOverlay() {
  if (!session) return;
  const ctx = overlayCtx;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);

  if (strokePts) {
    ctx.fillStyle = tool === "eraser" ? "rgba(76,201,240,0.55)" : "rgba(255,61,113,0.55)";
    for (const p of strokePts) {
      ctx.beginPath();
      ctx.arc(p.x, p.y, Math.max(radius, 0.5), 0, Math.PI * 2);
      ctx.fill();
    }
  }

  if (polygonPts.length > 0) {
    ctx.strokeStyle = "rgba(255,209,102,0.9)";
    ctx.lineWidth = Math.max(1 / zoom, 0.5);
    ctx.beginPath();
    ctx.moveTo(polygonPts[0].x + 0.5, polygonPts[0].y + 0.5);
    for (const p of polygonPts.slice(1)) ctx.lineTo(p.x + 0.5, p.y + 0.5);
    if (hoverPt && tool === "polygon") ctx.lineTo(hoverPt.x + 0.5, hoverPt.y + 0.5);
    ctx.stroke();
    ctx.fillStyle = "rgba(255,209,102,0.9)";
    for (const p of polygonPts) ctx.fillRect(p.x, p.y, 1, 1);
  }

  if (hoverPt && (tool === "brush" || tool === "eraser") && !strokePts) {
    ctx.strokeStyle = "rgba(232,233,238,0.8)";
    ctx.lineWidth = Math.max(1 / zoom, 0.25);
    ctx.beginPath();
    ctx.arc(hoverPt.x, hoverPt.y, Math.max(radius, 0.5), 0, Math.PI * 2);
    ctx.stroke();
  }

  const diag = session.lastDiagnostics;
  if (diag) {
    const px = (c: number, extent: number) => ((c + 1) / 2) * (extent - 1);
    diag.source_keypoints.forEach((kp, i) => {
      ctx.fillStyle = KEYPOINT_COLORS[i % KEYPOINT_COLORS.length];
      ctx.beginPath();
      ctx.arc(px(kp[0], session!.width), px(kp[1], session!.height), 2.5 / zoom + 1, 0, Math.PI * 2);
      ctx.fill();
    });
    diag.driver_keypoints.forEach((kp, i) => {
      ctx.strokeStyle = KEYPOINT_COLORS[i % KEYPOINT_COLORS.length];
      ctx.lineWidth = Math.max(1.5 / zoom, 0.5);
      ctx.beginPath();
      ctx.arc(px(kp[0], session!.width), px(kp[1], session!.height), 4 / zoom + 1.5, 0, Math.PI * 2);
      ctx.stroke();
    });
  }
}

// --- side panels ---------------------------------------------------------------

function renderCompare() {
  for (const url of compareUrls) URL.revokeObjectURL(url);
  compareUrls = [];
  if (!session || !session.previousExemplarPng) {
    els.comparePanel.hidden = true;
    return;
  }
  els.comparePanel.hidden = false;
  const after = pngBlobUrl(session.exemplarPng);
  const before = pngBlobUrl(session.previousExemplarPng);
  compareUrls = [after, before];
  els.afterImg.src = after;
  els.beforeImg.src = before;
  requestAnimationFrame(syncCompare);
}

function syncCompare() {
  els.beforeImg.style.width = `${els.afterImg.clientWidth}px`;
  els.beforeClip.style.width = `${Number(els.compareSlider.value)}%`;
}

function renderHistory() {
  for (const url of historyUrls) URL.revokeObjectURL(url);
  historyUrls = [];
  els.historyList.textContent = "";
  if (!session) return;
  session.history.forEach((entry, i) => {
    const li = document.createElement("li");
    const img = document.createElement("img");
    const url = pngBlobUrl(entry.imagePng);
    historyUrls.push(url);
    img.src = url;
    img.alt = `edit ${entry.step}`;
    const label = document.createElement("span");
    label.textContent = `step ${entry.step}`;
    li.append(img, label);
    if (i === session!.history.length - 1) li.className = "current";
    els.historyList.append(li);
  });
}

function renderDiagnostics() {
  els.diagPreviews.textContent = "";
  const diag = session?.lastDiagnostics ?? null;
  if (!diag) {
    els.diagPanel.hidden = true;
    return;
  }
  els.diagPanel.hidden = false;
  const flagged = diag.degenerate
    .map((bad, i) => (bad ? i : -1))
    .filter((i) => i >= 0);
  els.diagFlags.textContent = flagged.length === 0
    ? "all keypoint pairs well-conditioned"
    : `degenerate keypoint pairs: ${flagged.join(", ")}`;
  const addPreview = (b64: string, caption: string) => {
    const fig = document.createElement("figure");
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${b64}`;
    img.alt = caption;
    const cap = document.createElement("figcaption");
    cap.textContent = caption;
    fig.append(img, cap);
    els.diagPreviews.append(fig);
  };
  diag.attention.forEach((b64, i) => {
    const last = i === diag.attention.length - 1;
    addPreview(b64, last ? "background" : `attention k${i}`);
  });
  addPreview(diag.fused_field, "fused field");
}

function updateButtons() {
  const busy = session?.busy ?? false;
  const editor = session?.editor ?? null;
  els.undoBtn.disabled = !editor || busy || !editor.canUndo;
  els.redoBtn.disabled = !editor || busy || !editor.canRedo;
  els.clearBtn.disabled = !editor || busy;
  els.autoMaskBtn.disabled = !session || busy;
  els.runBtn.disabled = !editor || busy || editor.area() === 0;
  els.serverUndoBtn.disabled = !session || busy || session.steps === 0;
}

// --- pointer handling ----------------------------------------------------------

/** Map a pointer event to the integer pixel under the cursor. */
function pixelAt(ev: PointerEvent): Point | null {
  if (!session) return null;
  const rect = els.overlayCanvas.getBoundingClientRect();
  const x = Math.floor(((ev.clientX - rect.left) / rect.width) * session.width);
  const y = Math.floor(((ev.clientY - rect.top) / rect.height) * session.height);
  if (x < 0 || y < 0 || x >= session.width || y >= session.height) return null;
  return { x, y };
}

function commitPolygon(erase: boolean) {
  if (!session || polygonPts.length < 3) return;
  session.editor.applyPolygon(polygonPts, erase ? 0 : 1);
  polygonPts = [];
  paintMask();
  redrawOverlay();
}

function onPointerDown(ev: PointerEvent) {
  const pt = pixelAt(ev);
  if (!session || !pt || ev.button !== 0) return;
  if (tool === "brush" || tool === "eraser") {
    strokePts = [pt];
    els.overlayCanvas.setPointerCapture(ev.pointerId);
    redrawOverlay();
  } else if (tool === "polygon") {
    const last = polygonPts[polygonPts.length - 1];
    if (!last || last.x !== pt.x || last.y !== pt.y) polygonPts.push(pt);
    redrawOverlay();
  } else if (tool === "flood-fill") {
    session.editor.applyFill(pt.x, pt.y, ev.altKey ? 0 : 1);
    paintMask();
  }
}

function onPointerMove(ev: PointerEvent) {
  const pt = pixelAt(ev);
  hoverPt = pt;
  if (strokePts && pt) {
    const last = strokePts[strokePts.length - 1];
    if (last.x !== pt.x || last.y !== pt.y) strokePts.push(pt);
  }
  redrawOverlay();
}

function onPointerUp(ev: PointerEvent) {
  if (!session || !strokePts) return;
  els.overlayCanvas.releasePointerCapture(ev.pointerId);
  session.editor.applyStroke(strokePts, radius, tool === "eraser" ? 0 : 1);
  strokePts = null;
  paintMask();
  redrawOverlay();
}

// --- toolbar actions -------------------------------------------------------------

function selectTool(next: Tool) {
  tool = next;
  polygonPts = [];
  document.querySelectorAll<HTMLButtonElement>("#toolbar button[data-tool]")
    .forEach((b) => b.classList.toggle("active", b.dataset.tool === tool));
  redrawOverlay();
}

async function startSession() {
  const file = els.exemplarFile.files?.[0];
  if (!file) {
    setStatus("choose an exemplar image first", true);
    return;
  }
  els.startBtn.disabled = true;
  try {
    const exemplar = new Uint8Array(await file.arrayBuffer());
    const opts: { maskPng?: Uint8Array; resolution?: number } = {};
    const maskFile = els.maskFile.files?.[0];
    if (maskFile) opts.maskPng = new Uint8Array(await maskFile.arrayBuffer());
    if (els.resolution.value.trim() !== "") {
      opts.resolution = Number(els.resolution.value);
    }
    session = await StudioSession.start(client, exemplar, opts);
    zoom = Math.min(8, Math.max(1, Math.floor(512 / session.width)));
    els.zoom.value = String(zoom);
    els.setup.hidden = true;
    els.studio.hidden = false;
    els.sessionMeta.textContent =
      `session ${session.id.slice(0, 8)} · ${session.width}×${session.height}`;
    sizeCanvases();
    await drawExemplar();
    paintMask();
    renderHistory();
    renderCompare();
    renderDiagnostics();
    setStatus("session ready — paint a region, then run the edit");
  } catch (err) {
    showError(err);
  } finally {
    els.startBtn.disabled = false;
  }
}

async function runEdit() {
  if (!session) return;
  updateButtons();
  setStatus("running edit…");
  try {
    await session.runManipulation({ diagnostics: els.diagToggle.checked });
    await drawExemplar();
    renderHistory();
    renderCompare();
    renderDiagnostics();
    redrawOverlay();
    setStatus(`edit ${session.steps} applied`);
  } catch (err) {
    showError(err);
  } finally {
    updateButtons();
  }
}

async function serverUndo() {
  if (!session) return;
  setStatus("undoing last edit…");
  try {
    await session.undoEdit();
    await drawExemplar();
    paintMask();
    renderHistory();
    renderCompare();
    renderDiagnostics();
    redrawOverlay();
    setStatus(`rolled back to ${session.steps} edit(s)`);
  } catch (err) {
    showError(err);
  } finally {
    updateButtons();
  }
}

async function reAutoMask() {
  if (!session) return;
  try {
    await session.refreshMask({});
    paintMask();
    setStatus("mask re-estimated from the current exemplar");
  } catch (err) {
    showError(err);
  }
}

function onKeyDown(ev: KeyboardEvent) {
  if (document.activeElement instanceof HTMLInputElement) return;
  if (!session) return;
  if (ev.key === "Enter" && tool === "polygon") {
    commitPolygon(ev.altKey);
  } else if (ev.key === "Escape") {
    polygonPts = [];
    redrawOverlay();
  } else if ((ev.ctrlKey || ev.metaKey) && ev.key.toLowerCase() === "z") {
    if (ev.shiftKey) session.editor.redo();
    else session.editor.undo();
    paintMask();
  } else if (ev.key === "b") selectTool("brush");
  else if (ev.key === "e") selectTool("eraser");
  else if (ev.key === "p") selectTool("polygon");
  else if (ev.key === "f") selectTool("flood-fill");
  else if (ev.key === "[") {
    radius = Math.max(1, radius - 1);
    els.radius.value = String(radius);
    els.radiusOut.textContent = String(radius);
    redrawOverlay();
  } else if (ev.key === "]") {
    radius = Math.min(32, radius + 1);
    els.radius.value = String(radius);
    els.radiusOut.textContent = String(radius);
    redrawOverlay();
  }
}

// --- wiring -----------------------------------------------------------------------

function wire() {
  els.startBtn.addEventListener("click", () => void startSession());
  els.runBtn.addEventListener("click", () => void runEdit());
  els.serverUndoBtn.addEventListener("click", () => void serverUndo());
  els.autoMaskBtn.addEventListener("click", () => void reAutoMask());
  els.undoBtn.addEventListener("click", () => {
    session?.editor.undo();
    paintMask();
  });
  els.redoBtn.addEventListener("click", () => {
    session?.editor.redo();
    paintMask();
  });
  els.clearBtn.addEventListener("click", () => {
    session?.editor.fillAll(0);
    paintMask();
  });
  els.radius.addEventListener("input", () => {
    radius = Number(els.radius.value);
    els.radiusOut.textContent = String(radius);
    redrawOverlay();
  });
  els.zoom.addEventListener("change", () => {
    zoom = Number(els.zoom.value);
    applyZoom();
    redrawOverlay();
  });
  els.compareSlider.addEventListener("input", syncCompare);
  window.addEventListener("resize", syncCompare);
  document.querySelectorAll<HTMLButtonElement>("#toolbar button[data-tool]")
    .forEach((b) => b.addEventListener("click", () => {
      const next = b.dataset.tool;
      if (next && (TOOLS as string[]).includes(next)) selectTool(next as Tool);
    }));
  els.overlayCanvas.addEventListener("pointerdown", onPointerDown);
  els.overlayCanvas.addEventListener("pointermove", onPointerMove);
  els.overlayCanvas.addEventListener("pointerup", onPointerUp);
  els.overlayCanvas.addEventListener("pointerleave", () => {
    hoverPt = null;
    redrawOverlay();
  });
  els.overlayCanvas.addEventListener("dblclick", (ev) => commitPolygon(ev.altKey));
  els.overlayCanvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
  document.addEventListener("keydown", onKeyDown);
}

async function probeHealth() {
  try {
    const h = await client.health();
    els.health.textContent =
      `${h.status} · K=${h.num_keypoints} · ${h.internal_resolution}px · step ${h.checkpoint_step}`;
    els.health.className = "ok";
  } catch {
    els.health.textContent = "service unreachable";
    els.health.className = "error";
  }
}

wire();
selectTool("brush");
void probeHealth();
