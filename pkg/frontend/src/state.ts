// The whole editing session as the canvas sees it: the loaded image, the
// brushed object mask M_v, the drag vector, prompts, and the advanced
// settings form. The derived target mask M_c is always the client-side
// translate(M_v, dx, dy); buildEditSpec turns the state into the JSON
// document the service accepts.

import { countPainted, createMask, translateMask, type MaskRaster } from "./mask.js";
import type { EditSpec, Violation } from "./types.js";
import { validateAgainstSchema } from "./validate.js";

export interface LoadedImage {
  name: string;
  bytes: Uint8Array;
  width: number;
  height: number;
}

export interface PastePayload {
  imageName: string; // session asset name of the uploaded payload image
  maskName: string; // session asset name of the lasso mask
  mask: MaskRaster; // local copy, for centroid/preview math
}

/** Advanced settings, field-for-field the tunable part of an EditSpec. */
export interface AdvancedSettings {
  objectWord: string; // "" = let the server pick from the prompt
  controlMode: "cross_attn" | "mutual_self_attn" | "none";
  tauCross: number;
  selfAttnStart: number;
  mEdit: number;
  mContent: number;
  mInpaint: number;
  energyTLo: number;
  energyTHi: number;
  clipNorm: number;
  lambdaC: number;
  lambdaI: number;
  innerSteps: number;
  stepSize: number;
  npmlTLo: number;
  npmlTHi: number;
  cfgScale1: number;
  cfgScale2: number;
  tSkip: number;
  seed: number;
  ggs: boolean;
  npml: boolean;
  dnp: boolean;
  dref: boolean;
}

export interface CanvasEditState {
  image: LoadedImage | null;
  mask: MaskRaster;
  drag: { dx: number; dy: number };
  mode: "drag" | "paste";
  paste: PastePayload | null;
  promptSource: string;
  promptTarget: string;
  settings: AdvancedSettings;
}

/**
 * Read the published edit-spec schema's declared defaults so the settings
 * form starts exactly where the server would fill them in.
 */
export function settingsFromSchema(schema: Record<string, any>): AdvancedSettings {
  const p = schema.properties;
  const d = (node: any, key: string) => node.properties[key].default;
  return {
    objectWord: "",
    controlMode: d(p.control, "mode"),
    tauCross: d(p.control, "tau_cross"),
    selfAttnStart: d(p.control, "self_attn_start"),
    mEdit: d(p.energy, "m_edit"),
    mContent: d(p.energy, "m_content"),
    mInpaint: d(p.energy, "m_inpaint"),
    energyTLo: d(p.energy, "t_lo"),
    energyTHi: d(p.energy, "t_hi"),
    clipNorm: d(p.energy, "clip_norm"),
    lambdaC: d(p.npml, "lambda_c"),
    lambdaI: d(p.npml, "lambda_i"),
    innerSteps: d(p.npml, "inner_steps"),
    stepSize: d(p.npml, "step_size"),
    npmlTLo: d(p.npml, "t_lo"),
    npmlTHi: d(p.npml, "t_hi"),
    cfgScale1: p.cfg_scale_1.default,
    cfgScale2: p.cfg_scale_2.default,
    tSkip: p.T_skip.default,
    seed: p.seed.default,
    ggs: d(p.ablations, "ggs"),
    npml: d(p.ablations, "npml"),
    dnp: d(p.ablations, "dnp"),
    dref: d(p.ablations, "dref"),
  };
}

export function createEditState(resolution: number, schema: Record<string, any>): CanvasEditState {
  return {
    image: null,
    mask: createMask(resolution, resolution),
    drag: { dx: 0, dy: 0 },
    mode: "drag",
    paste: null,
    promptSource: "",
    promptTarget: "",
    settings: settingsFromSchema(schema),
  };
}

/** The M_c preview shown on the canvas: translate(M_v, dx, dy), always. */
export function targetMaskPreview(state: CanvasEditState): Uint8Array {
  return translateMask(state.mask, state.drag.dx, state.drag.dy);
}

/** Submit gate: needs an image, a non-empty brushed mask, and both prompts. */
export function canSubmit(state: CanvasEditState): boolean {
  if (state.image === null) return false;
  if (state.mode === "paste") {
    if (state.paste === null) return false;
  } else if (countPainted(state.mask) === 0) {
    return false;
  }
  return state.promptSource.trim().length > 0 && state.promptTarget.trim().length > 0;
}

/** Build the EditSpec document the job endpoint accepts. */
export function buildEditSpec(state: CanvasEditState): EditSpec {
  const s = state.settings;
  const drag: EditSpec["drag"] = {
    dx: Math.round(state.drag.dx),
    dy: Math.round(state.drag.dy),
    mode: state.mode,
  };
  if (state.mode === "paste" && state.paste !== null) {
    drag.source_image_ref = state.paste.imageName;
    drag.source_mask_ref = state.paste.maskName;
  }
  const spec: EditSpec = {
    prompt_source: state.promptSource.trim(),
    prompt_target: state.promptTarget.trim(),
    drag,
    control: {
      mode: s.controlMode,
      tau_cross: s.tauCross,
      self_attn_start: s.selfAttnStart,
    },
    energy: {
      m_edit: s.mEdit,
      m_content: s.mContent,
      m_inpaint: s.mInpaint,
      t_lo: s.energyTLo,
      t_hi: s.energyTHi,
      clip_norm: s.clipNorm,
    },
    npml: {
      lambda_c: s.lambdaC,
      lambda_i: s.lambdaI,
      inner_steps: s.innerSteps,
      step_size: s.stepSize,
      t_lo: s.npmlTLo,
      t_hi: s.npmlTHi,
    },
    cfg_scale_1: s.cfgScale1,
    cfg_scale_2: s.cfgScale2,
    T_skip: s.tSkip,
    seed: s.seed,
    ablations: { ggs: s.ggs, npml: s.npml, dnp: s.dnp, dref: s.dref },
  };
  if (s.objectWord.trim() !== "") {
    spec.object_word = s.objectWord.trim();
  }
  return spec;
}

/** Validate the built spec against the server's published schema. */
export function validateState(state: CanvasEditState, schema: Record<string, any>): Violation[] {
  return validateAgainstSchema(buildEditSpec(state), schema);
}
