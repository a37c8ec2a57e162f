// DOM wiring for the single-page editor. All editing math stays on the
// server; the only derived computation here is the M_c preview
// (translate(M_v, dx, dy)) and it must match the server's derivation.
//
// jsdom note: the headless tests run without a real 2D canvas, so every
// paint call checks for a context first — application state never depends
// on being able to draw.

import { ApiError, DragEditApi } from "./api.js";
import {
  brushLine,
  clearMask,
  countPainted,
  createMask,
  lassoToMask,
  maskCentroid,
  maskToPng,
  translateMask,
  type MaskRaster,
} from "./mask.js";
import { JobMonitor, latestPreview, metricSeries, type MonitorPhase } from "./monitor.js";
import { clientToPixel, overlayRect } from "./overlay.js";
import { sparklineSvg } from "./sparkline.js";
import {
  buildEditSpec,
  canSubmit,
  createEditState,
  settingsFromSchema,
  validateState,
  type CanvasEditState,
} from "./state.js";
import type { Violation } from "./types.js";

type Tool = "brush" | "erase" | "drag";

export interface App {
  api: DragEditApi;
  state: CanvasEditState;
  resolution: number;
  sessionId: string | null;
  jobId: string | null;
  monitor: JobMonitor | null;
  submit: () => Promise<void>;
  refresh: () => void;
}

function $<T extends HTMLElement>(root: Document, id: string): T {
  const el = root.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

function setBlobImage(img: HTMLImageElement, bytes: Uint8Array): void {
  // jsdom has no createObjectURL; skip display there, state still updates
  if (typeof URL.createObjectURL !== "function") return;
  const blob = new Blob([bytes as BlobPart], { type: "image/png" });
  img.src = URL.createObjectURL(blob);
}

export async function initApp(root: Document, apiBase: string): Promise<App> {
  const api = new DragEditApi(apiBase);
  const health = await api.healthz();
  const schema = await api.schema();
  const res = health.model.resolution;

  const state = createEditState(res, schema);
  const app: App = {
    api,
    state,
    resolution: res,
    sessionId: null,
    jobId: null,
    monitor: null,
    submit,
    refresh,
  };

  // ---- elements ------------------------------------------------------------
  const canvas = $<HTMLCanvasElement>(root, "edit-canvas");
  const canvasWrap = $<HTMLElement>(root, "canvas-wrap");
  canvas.width = res;
  canvas.height = res;
  const ctx = canvas.getContext("2d");
  const fileInput = $<HTMLInputElement>(root, "image-file");
  const modeSelect = $<HTMLSelectElement>(root, "edit-mode");
  const promptSource = $<HTMLInputElement>(root, "prompt-source");
  const promptTarget = $<HTMLInputElement>(root, "prompt-target");
  const violationsEl = $<HTMLUListElement>(root, "violations");
  const statusLine = $<HTMLElement>(root, "status-line");
  const phaseEl = $<HTMLElement>(root, "job-phase");
  const submitBtn = $<HTMLButtonElement>(root, "submit-btn");
  const invertBtn = $<HTMLButtonElement>(root, "invert-btn");
  const dragReadout = $<HTMLElement>(root, "drag-readout");
  const previewImg = $<HTMLImageElement>(root, "preview-img");
  const sourceImg = $<HTMLImageElement>(root, "source-img");
  const branch1Img = $<HTMLImageElement>(root, "branch1-img");
  const branch2Img = $<HTMLImageElement>(root, "branch2-img");
  const sparklines = $<HTMLElement>(root, "sparklines");
  const attOverlay = $<HTMLImageElement>(root, "attention-overlay");
  const attLoad = $<HTMLButtonElement>(root, "att-load");

  // settings inputs, keyed by the AdvancedSettings field they mirror
  const numberInputs: Record<string, HTMLInputElement> = {
    tauCross: $(root, "tau-cross"),
    selfAttnStart: $(root, "self-attn-start"),
    mEdit: $(root, "m-edit"),
    mContent: $(root, "m-content"),
    mInpaint: $(root, "m-inpaint"),
    energyTLo: $(root, "energy-t-lo"),
    energyTHi: $(root, "energy-t-hi"),
    clipNorm: $(root, "clip-norm"),
    lambdaC: $(root, "lambda-c"),
    lambdaI: $(root, "lambda-i"),
    innerSteps: $(root, "inner-steps"),
    stepSize: $(root, "step-size"),
    npmlTLo: $(root, "npml-t-lo"),
    npmlTHi: $(root, "npml-t-hi"),
    cfgScale1: $(root, "cfg-scale-1"),
    cfgScale2: $(root, "cfg-scale-2"),
    tSkip: $(root, "t-skip"),
    seed: $(root, "seed"),
  };
  const boolInputs: Record<string, HTMLInputElement> = {
    ggs: $(root, "abl-ggs"),
    npml: $(root, "abl-npml"),
    dnp: $(root, "abl-dnp"),
    dref: $(root, "abl-dref"),
  };
  const controlMode = $<HTMLSelectElement>(root, "control-mode");
  const objectWord = $<HTMLInputElement>(root, "object-word");

  // seed the form from the schema defaults so it mirrors the server
  const defaults = settingsFromSchema(schema);
  for (const [key, input] of Object.entries(numberInputs)) {
    input.value = String((defaults as any)[key]);
  }
  for (const [key, input] of Object.entries(boolInputs)) {
    input.checked = (defaults as any)[key];
  }
  controlMode.value = defaults.controlMode;

  function readSettings(): void {
    for (const [key, input] of Object.entries(numberInputs)) {
      (state.settings as any)[key] = Number(input.value);
    }
    for (const [key, input] of Object.entries(boolInputs)) {
      (state.settings as any)[key] = input.checked;
    }
    state.settings.controlMode = controlMode.value as any;
    state.settings.objectWord = objectWord.value;
  }

  // ---- canvas painting -----------------------------------------------------
  let sourceBitmap: ImageBitmap | null = null;

  function redraw(): void {
    if (!ctx) return;
    ctx.clearRect(0, 0, res, res);
    if (sourceBitmap) ctx.drawImage(sourceBitmap, 0, 0, res, res);
    const img = ctx.getImageData(0, 0, res, res);
    const mc = translateMask(state.mask, state.drag.dx, state.drag.dy);
    for (let i = 0; i < res * res; i++) {
      if (state.mask.data[i] > 127) {
        // painted mask in translucent red
        img.data[i * 4] = Math.min(255, img.data[i * 4] + 140);
        img.data[i * 4 + 3] = 255;
      }
      if (mc[i] === 1) {
        // M_c preview in translucent green
        img.data[i * 4 + 1] = Math.min(255, img.data[i * 4 + 1] + 140);
        img.data[i * 4 + 3] = 255;
      }
    }
    ctx.putImageData(img, 0, 0);
  }

  function refresh(): void {
    readSettings();
    state.promptSource = promptSource.value;
    state.promptTarget = promptTarget.value;
    dragReadout.textContent = `${state.drag.dx}, ${state.drag.dy}`;
    const violations = state.image === null ? [] : validateState(state, schema);
    renderViolations(violations);
    submitBtn.disabled = !canSubmit(state) || violations.length > 0;
    invertBtn.disabled = state.image === null || state.promptSource.trim() === "";
    redraw();
  }

  function renderViolations(violations: Violation[]): void {
    violationsEl.innerHTML = "";
    for (const v of violations) {
      const li = root.createElement("li");
      li.textContent = `${v.pointer || "/"}: ${v.message}`;
      violationsEl.appendChild(li);
    }
  }

  function setStatus(text: string): void {
    statusLine.textContent = text;
  }

  // ---- image load ----------------------------------------------------------
  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    const bytes = new Uint8Array(await file.arrayBuffer());
    state.image = { name: file.name, bytes, width: res, height: res };
    setBlobImage(sourceImg, bytes);
    try {
      if (typeof createImageBitmap === "function") {
        sourceBitmap = await createImageBitmap(new Blob([bytes as BlobPart]));
      }
    } catch {
      sourceBitmap = null; // display-only; editing proceeds without it
    }
    app.sessionId = await api.createSession(bytes);
    setStatus(`session ${app.sessionId} created, image uploaded`);
    refresh();
  });

  // ---- tools ---------------------------------------------------------------
  let tool: Tool = "brush";
  const toolButtons: Record<Tool, HTMLButtonElement> = {
    brush: $(root, "tool-brush"),
    erase: $(root, "tool-erase"),
    drag: $(root, "tool-drag"),
  };
  for (const [name, btn] of Object.entries(toolButtons)) {
    btn.addEventListener("click", () => {
      tool = name as Tool;
      for (const b of Object.values(toolButtons)) b.classList.remove("active");
      btn.classList.add("active");
    });
  }
  const brushSize = $<HTMLInputElement>(root, "brush-size");
  $<HTMLButtonElement>(root, "mask-clear").addEventListener("click", () => {
    clearMask(state.mask);
    state.drag = { dx: 0, dy: 0 };
    refresh();
  });

  let painting = false;
  let dragging = false;
  let last = { x: 0, y: 0 };
  let dragStart = { x: 0, y: 0 };

  function canvasPixel(ev: { clientX: number; clientY: number }): { x: number; y: number } {
    const r = canvas.getBoundingClientRect();
    return clientToPixel(
      { left: r.left, top: r.top, width: r.width || res, height: r.height || res },
      res,
      ev.clientX,
      ev.clientY,
    );
  }

  canvas.addEventListener("pointerdown", (ev) => {
    const p = canvasPixel(ev as PointerEvent);
    if (state.mode === "paste" && state.paste !== null) {
      placePaste(p);
      return;
    }
    if (tool === "drag") {
      dragging = true;
      dragStart = p;
    } else {
      painting = true;
      last = p;
      brushLine(state.mask, p.x, p.y, p.x, p.y, Number(brushSize.value), tool === "erase" ? 0 : 255);
    }
    refresh();
  });
  canvas.addEventListener("pointermove", (ev) => {
    const p = canvasPixel(ev as PointerEvent);
    if (painting) {
      brushLine(state.mask, last.x, last.y, p.x, p.y, Number(brushSize.value), tool === "erase" ? 0 : 255);
      last = p;
      refresh();
    } else if (dragging) {
      state.drag = { dx: Math.round(p.x - dragStart.x), dy: Math.round(p.y - dragStart.y) };
      refresh();
    }
  });
  const endStroke = () => {
    painting = false;
    dragging = false;
  };
  canvas.addEventListener("pointerup", endStroke);
  canvas.addEventListener("pointerleave", endStroke);

  // ---- paste mode ----------------------------------------------------------
  const pasteControls = $<HTMLElement>(root, "paste-controls");
  const pasteFile = $<HTMLInputElement>(root, "paste-file");
  const pasteCanvas = $<HTMLCanvasElement>(root, "paste-canvas");
  let pasteBytes: Uint8Array | null = null;
  let lassoPoints: Array<{ x: number; y: number }> = [];

  modeSelect.addEventListener("change", () => {
    state.mode = modeSelect.value as "drag" | "paste";
    pasteControls.style.display = state.mode === "paste" ? "block" : "none";
    refresh();
  });

  pasteFile.addEventListener("change", async () => {
    const file = pasteFile.files?.[0];
    if (!file) return;
    pasteBytes = new Uint8Array(await file.arrayBuffer());
    lassoPoints = [];
    state.paste = null;
    setStatus("payload loaded — lasso the region to paste");
    refresh();
  });

  pasteCanvas.addEventListener("pointerdown", (ev) => {
    const r = pasteCanvas.getBoundingClientRect();
    const p = clientToPixel(
      { left: r.left, top: r.top, width: r.width || res, height: r.height || res },
      res,
      (ev as PointerEvent).clientX,
      (ev as PointerEvent).clientY,
    );
    lassoPoints.push(p);
    if (lassoPoints.length >= 3 && pasteBytes !== null) {
      const mask = lassoToMask(res, res, lassoPoints);
      if (countPainted(mask) > 0) {
        state.paste = { imageName: "paste_src.png", maskName: "paste_mask.png", mask };
        setStatus("payload lassoed — click the main canvas to place it");
      }
    }
    refresh();
  });

  function placePaste(p: { x: number; y: number }): void {
    if (state.paste === null) return;
    const c = maskCentroid(state.paste.mask);
    if (c === null) return;
    state.drag = { dx: Math.round(p.x - c.x), dy: Math.round(p.y - c.y) };
    refresh();
  }

  // ---- prompts + settings --------------------------------------------------
  for (const input of [
    promptSource,
    promptTarget,
    objectWord,
    controlMode,
    ...Object.values(numberInputs),
    ...Object.values(boolInputs),
  ]) {
    input.addEventListener("input", refresh);
    input.addEventListener("change", refresh);
  }

  // ---- invert --------------------------------------------------------------
  invertBtn.addEventListener("click", async () => {
    if (app.sessionId === null) return;
    readSettings();
    setStatus("inverting…");
    try {
      const out = await api.invert(
        app.sessionId,
        promptSource.value.trim(),
        state.settings.seed,
        state.settings.cfgScale1,
      );
      setStatus(out.cached ? "trajectory ready (cached)" : "trajectory extracted");
    } catch (err) {
      setStatus((err as Error).message);
    }
  });

  // ---- submit + monitor ----------------------------------------------------
  function applyEvents(): void {
    if (app.monitor === null || app.jobId === null) return;
    const preview = latestPreview(app.monitor.events);
    if (preview !== null) {
      previewImg.src = api.previewUrl(app.jobId, preview);
    }
    sparklines.innerHTML = metricSeries(app.monitor.events)
      .map((s) => `<div class="spark">${sparklineSvg(s.label, s.points)}<span>${s.label}</span></div>`)
      .join("");
  }

  function showPhase(phase: MonitorPhase): void {
    phaseEl.textContent = phase === "expired" ? "job expired" : phase;
  }

  async function submit(): Promise<void> {
    refresh();
    if (submitBtn.disabled || state.image === null) return;
    if (app.sessionId === null) {
      app.sessionId = await api.createSession(state.image.bytes);
    }
    const sid = app.sessionId;
    setStatus("uploading mask…");
    try {
      await api.uploadMask(sid, maskToPng(state.mask));
      if (state.mode === "paste" && state.paste !== null && pasteBytes !== null) {
        await api.uploadAsset(sid, state.paste.imageName, pasteBytes);
        await api.uploadAsset(sid, state.paste.maskName, maskToPng(state.paste.mask));
      }
      const spec = buildEditSpec(state);
      app.jobId = await api.submitJob(sid, spec);
    } catch (err) {
      if (err instanceof ApiError && err.violations.length > 0) {
        renderViolations(err.violations);
      }
      setStatus((err as Error).message);
      return;
    }
    setStatus(`job ${app.jobId} submitted`);
    attLoad.disabled = false;
    app.monitor = new JobMonitor(api, app.jobId, { onEvent: applyEvents, onPhase: showPhase });
    showPhase("queued");
    const phase = await app.monitor.run();
    if (phase === "done") {
      branch1Img.src = api.resultUrl(app.jobId, "branch1");
      branch2Img.src = api.resultUrl(app.jobId, "branch2");
      const status = await api.jobStatus(app.jobId);
      const metrics = Object.entries(status.metrics ?? {})
        .map(([k, v]) => `${k}=${Number(v).toPrecision(3)}`)
        .join("  ");
      setStatus(metrics === "" ? "edit finished" : metrics);
    } else if (phase === "failed") {
      const status = await api.jobStatus(app.jobId);
      setStatus(status.error ?? "job failed");
    }
  }
  submitBtn.addEventListener("click", () => void submit());

  // ---- attention overlay ---------------------------------------------------
  const attToken = $<HTMLInputElement>(root, "att-token");
  const attT = $<HTMLInputElement>(root, "att-t");
  const attOpacity = $<HTMLInputElement>(root, "att-opacity");
  attLoad.addEventListener("click", () => {
    if (app.sessionId === null) return;
    const r = canvas.getBoundingClientRect();
    const box = overlayRect({ left: 0, top: 0, width: r.width || res, height: r.height || res });
    attOverlay.style.left = `${box.left}px`;
    attOverlay.style.top = `${box.top}px`;
    attOverlay.style.width = `${box.width}px`;
    attOverlay.style.height = `${box.height}px`;
    attOverlay.style.opacity = String(Number(attOpacity.value) / 100);
    attOverlay.style.display = "block";
    attOverlay.src = api.attentionUrl(
      app.sessionId,
      Number(attToken.value),
      Number(attT.value),
      app.jobId ?? undefined,
    );
    void canvasWrap; // overlay is positioned within the wrap
  });
  $<HTMLButtonElement>(root, "att-hide").addEventListener("click", () => {
    attOverlay.style.display = "none";
  });
  attOpacity.addEventListener("input", () => {
    attOverlay.style.opacity = String(Number(attOpacity.value) / 100);
  });

  refresh();
  return app;
}
