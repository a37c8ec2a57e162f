"""End-to-end drag-and-instruct editing.

A run is four sequential stages:

1. invert   — edit-friendly DDPM inversion of the input under the source prompt
2. inject   — drag (or paste) noise-prior injection into the noise maps
3. branch1  — moving-reconstruction sampling: regional energy guidance and
              attention-mask learning under the source prompt; gradients and
              attention captures are recorded and sealed
4. branch2  — text-driven editing sampling under the target prompt, replaying
              the recorded gradients and applying the selected attention control

Everything is deterministic for a fixed spec (the only randomness is the
seeded inversion noise).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import jsonschema
import torch

from .attention import (AttentionStore, align_prompts, cross_attention_control,
                        mutual_self_attention_control)
from .backbone import (ConditionEmbedding, LatentState, OBJECT_WORDS,
                       ToyBackbone, cfg_combine)
from .errors import EditSpecError, StageError
from .guidance import (EnergyConfig, GuidanceRecord, compute_guidance,
                       fetch_guidance, store_guidance)
from .images import load_image, load_mask
from .inversion import (NoiseTrajectory, ShiftSpec, ddpm_invert,
                        inject_noise_prior, inject_paste_prior, reverse_step)
from .masks import RegionMasks, as_binary_mask
from .npml import NpmlConfig, NpmlTrace, optimize_object_embedding

EDIT_SPEC_VERSION = 1

EDIT_SPEC_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EditSpec",
    "type": "object",
    "additionalProperties": False,
    "required": ["prompt_source", "prompt_target", "drag"],
    "properties": {
        "version": {"type": "integer", "const": EDIT_SPEC_VERSION, "default": 1},
        "image_ref": {"type": ["string", "null"], "default": None},
        "mask_ref": {"type": ["string", "null"], "default": None},
        "prompt_source": {"type": "string", "minLength": 1},
        "prompt_target": {"type": "string", "minLength": 1},
        "object_word": {"type": ["string", "null"], "default": None},
        "drag": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dx", "dy"],
            "properties": {
                "dx": {"type": "integer"},
                "dy": {"type": "integer"},
                "mode": {"enum": ["drag", "paste"], "default": "drag"},
                "source_image_ref": {"type": ["string", "null"], "default": None},
                "source_mask_ref": {"type": ["string", "null"], "default": None},
            },
        },
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["cross_attn", "mutual_self_attn", "none"],
                         "default": "cross_attn"},
                "tau_cross": {"type": "number", "minimum": 0, "maximum": 1,
                              "default": 0.8},
                "self_attn_start": {"type": "integer", "minimum": 0, "default": 20},
                "q_margin": {"type": ["integer", "null"], "minimum": 0,
                             "default": None},
            },
            "default": {},
        },
        "energy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m_edit": {"type": "number", "minimum": 0, "default": 1.0},
                "m_content": {"type": "number", "minimum": 0, "default": 1.0},
                "m_inpaint": {"type": "number", "minimum": 0, "default": 2.0},
                "feature_layer": {"type": "string", "default": "dec16"},
                "t_lo": {"type": "integer", "minimum": 1, "default": 30},
                "t_hi": {"type": "integer", "minimum": 1, "default": 80},
                "clip_norm": {"type": "number", "exclusiveMinimum": 0,
                              "default": 1.0},
            },
            "default": {},
        },
        "npml": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_c": {"type": "number", "minimum": 0, "default": 0.5},
                "lambda_i": {"type": "number", "minimum": 0, "default": 0.5},
                "inner_steps": {"type": "integer", "minimum": 0, "default": 3},
                "step_size": {"type": "number", "exclusiveMinimum": 0,
                              "default": 0.01},
                "resolution": {"type": "integer", "minimum": 1, "default": 16},
                "t_lo": {"type": "integer", "minimum": 1, "default": 30},
                "t_hi": {"type": "integer", "minimum": 1, "default": 80},
            },
            "default": {},
        },
        "cfg_scale_1": {"type": "number", "minimum": 0, "default": 3.5},
        "cfg_scale_2": {"type": "number", "minimum": 0, "default": 7.5},
        "T": {"type": "integer", "minimum": 1, "default": 100},
        "T_skip": {"type": "integer", "minimum": 0, "default": 15},
        "seed": {"type": "integer", "default": 0},
        "ablations": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ggs": {"type": "boolean", "default": True},
                "npml": {"type": "boolean", "default": True},
                "dnp": {"type": "boolean", "default": True},
                "dref": {"type": "boolean", "default": True},
            },
            "default": {},
        },
    },
}


def _fill_defaults(obj: dict, schema: dict) -> dict:
    """Deep-fill defaults declared in the schema into a copy of obj."""
    out = copy.deepcopy(obj)
    for key, sub in schema.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out and isinstance(out[key], dict) and sub.get("type") == "object":
            out[key] = _fill_defaults(out[key], sub)
    return out


def validate_edit_spec(obj: dict) -> dict:
    """Validate against the schema; returns the default-filled document.

    Raises EditSpecError carrying (json-pointer, message) pairs for every
    violation found.
    """
    validator = jsonschema.Draft202012Validator(EDIT_SPEC_SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        raise EditSpecError(
            ("/" + "/".join(str(p) for p in e.absolute_path), e.message)
            for e in errors)
    filled = _fill_defaults(obj, EDIT_SPEC_SCHEMA)
    drag = filled["drag"]
    for key, default in (("mode", "drag"), ("source_image_ref", None),
                         ("source_mask_ref", None)):
        drag.setdefault(key, default)
    if filled["T_skip"] > filled["T"]:
        raise EditSpecError([("/T_skip", "T_skip must not exceed T")])
    e = filled["energy"]
    if e["t_lo"] > e["t_hi"]:
        raise EditSpecError([("/energy/t_lo", "t_lo must not exceed t_hi")])
    n = filled["npml"]
    if n["t_lo"] > n["t_hi"]:
        raise EditSpecError([("/npml/t_lo", "t_lo must not exceed t_hi")])
    if drag["mode"] == "paste" and (drag["source_image_ref"] is None
                                    or drag["source_mask_ref"] is None):
        raise EditSpecError(
            [("/drag/mode", "paste mode requires source_image_ref and source_mask_ref")])
    return filled


@dataclass
class EditSpec:
    """Validated, default-filled description of one edit job."""
    prompt_source: str
    prompt_target: str
    dx: int
    dy: int
    mode: str = "drag"
    image_ref: Optional[str] = None
    mask_ref: Optional[str] = None
    object_word: Optional[str] = None
    source_image_ref: Optional[str] = None
    source_mask_ref: Optional[str] = None
    control_mode: str = "cross_attn"
    tau_cross: float = 0.8
    self_attn_start: int = 20
    q_margin: Optional[int] = None
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    npml: NpmlConfig = field(default_factory=NpmlConfig)
    cfg_scale_1: float = 3.5
    cfg_scale_2: float = 7.5
    T: int = 100
    T_skip: int = 15
    seed: int = 0
    ggs: bool = True
    npml_on: bool = True
    dnp: bool = True
    dref: bool = True

    @classmethod
    def from_json(cls, obj: dict) -> "EditSpec":
        filled = validate_edit_spec(obj)
        c, e, n, a = (filled["control"], filled["energy"], filled["npml"],
                      filled["ablations"])
        return cls(
            prompt_source=filled["prompt_source"],
            prompt_target=filled["prompt_target"],
            dx=filled["drag"]["dx"], dy=filled["drag"]["dy"],
            mode=filled["drag"]["mode"],
            image_ref=filled["image_ref"], mask_ref=filled["mask_ref"],
            object_word=filled["object_word"],
            source_image_ref=filled["drag"]["source_image_ref"],
            source_mask_ref=filled["drag"]["source_mask_ref"],
            control_mode=c["mode"], tau_cross=c["tau_cross"],
            self_attn_start=c["self_attn_start"], q_margin=c["q_margin"],
            energy=EnergyConfig(m_edit=e["m_edit"], m_content=e["m_content"],
                                m_inpaint=e["m_inpaint"],
                                feature_layer=e["feature_layer"],
                                t_lo=e["t_lo"], t_hi=e["t_hi"],
                                clip_norm=e["clip_norm"]),
            npml=NpmlConfig(lambda_c=n["lambda_c"], lambda_i=n["lambda_i"],
                            inner_steps=n["inner_steps"],
                            step_size=n["step_size"],
                            resolution=n["resolution"],
                            t_lo=n["t_lo"], t_hi=n["t_hi"]),
            cfg_scale_1=filled["cfg_scale_1"], cfg_scale_2=filled["cfg_scale_2"],
            T=filled["T"], T_skip=filled["T_skip"], seed=filled["seed"],
            ggs=a["ggs"], npml_on=a["npml"], dnp=a["dnp"], dref=a["dref"],
        )

    def to_json(self) -> dict:
        return {
            "version": EDIT_SPEC_VERSION,
            "image_ref": self.image_ref, "mask_ref": self.mask_ref,
            "prompt_source": self.prompt_source,
            "prompt_target": self.prompt_target,
            "object_word": self.object_word,
            "drag": {"dx": self.dx, "dy": self.dy, "mode": self.mode,
                     "source_image_ref": self.source_image_ref,
                     "source_mask_ref": self.source_mask_ref},
            "control": {"mode": self.control_mode, "tau_cross": self.tau_cross,
                        "self_attn_start": self.self_attn_start,
                        "q_margin": self.q_margin},
            "energy": {"m_edit": self.energy.m_edit,
                       "m_content": self.energy.m_content,
                       "m_inpaint": self.energy.m_inpaint,
                       "feature_layer": self.energy.feature_layer,
                       "t_lo": self.energy.t_lo, "t_hi": self.energy.t_hi,
                       "clip_norm": self.energy.clip_norm},
            "npml": {"lambda_c": self.npml.lambda_c,
                     "lambda_i": self.npml.lambda_i,
                     "inner_steps": self.npml.inner_steps,
                     "step_size": self.npml.step_size,
                     "resolution": self.npml.resolution,
                     "t_lo": self.npml.t_lo, "t_hi": self.npml.t_hi},
            "cfg_scale_1": self.cfg_scale_1, "cfg_scale_2": self.cfg_scale_2,
            "T": self.T, "T_skip": self.T_skip, "seed": self.seed,
            "ablations": {"ggs": self.ggs, "npml": self.npml_on,
                          "dnp": self.dnp, "dref": self.dref},
        }

    def shift(self, source_trajectory=None, source_mask=None) -> ShiftSpec:
        return ShiftSpec(self.dx, self.dy, mode=self.mode,
                         source_trajectory=source_trajectory,
                         source_mask=source_mask)


@dataclass
class EditResult:
    branch1: torch.Tensor
    branch2: torch.Tensor
    log: List[dict]
    masks: RegionMasks
    guidance_record: Optional[GuidanceRecord]
    attention_store: AttentionStore
    npml_trace: NpmlTrace
    trajectory: NoiseTrajectory
    injected_trajectory: NoiseTrajectory


def predicted_x0(schedule, x_t: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
    ab = float(schedule.alpha_bar[t])
    return ((x_t - (1 - ab) ** 0.5 * eps) / ab ** 0.5).clamp(-1, 1)


def _object_slot_for(cond: ConditionEmbedding, object_word: Optional[str]) -> int:
    if object_word is not None:
        matches = [i for i, w in enumerate(cond.words) if w == object_word]
        if not matches:
            raise ValueError(f"object word {object_word!r} not in the source prompt")
        return matches[-1]
    slots = sorted(cond.editable_slots)
    if not slots:
        raise ValueError("source prompt contains no object word")
    return slots[-1]


def run_edit(backbone: ToyBackbone, spec: EditSpec,
             image: Optional[torch.Tensor] = None,
             m_v: Optional[torch.Tensor] = None,
             trajectory: Optional[NoiseTrajectory] = None,
             source_trajectory: Optional[NoiseTrajectory] = None,
             source_mask: Optional[torch.Tensor] = None,
             on_event: Optional[Callable[[dict], None]] = None) -> EditResult:
    """Run the full two-branch edit described by ``spec``.

    ``image`` / ``m_v`` may be given directly or resolved from the spec's refs.
    A precomputed ``trajectory`` (from the same image, prompt, seed, and CFG
    scale) skips the inversion stage. Paste mode needs ``source_trajectory``
    and ``source_mask`` (or the corresponding refs).
    """
    log: List[dict] = []

    def emit(event: dict) -> None:
        log.append(event)
        if on_event is not None:
            on_event(event)

    if spec.T != backbone.config.T:
        raise StageError("setup", ValueError(
            f"spec T={spec.T} does not match backbone T={backbone.config.T}"))

    try:
        if image is None:
            if spec.image_ref is None:
                raise ValueError("no image: spec.image_ref is null and no array given")
            image = load_image(spec.image_ref)
        if m_v is None:
            if spec.mask_ref is None:
                raise ValueError("no mask: spec.mask_ref is null and no array given")
            m_v = load_mask(spec.mask_ref)
        m_v = as_binary_mask(m_v)
        res = backbone.config.resolution
        masks = RegionMasks.build(m_v, spec.dx, spec.dy, resolutions=(16, 8),
                                  q_margin=spec.q_margin)
        for note in masks.notes:
            emit({"stage": "setup", "warning": note})
        cond_s = backbone.encode_prompt(spec.prompt_source)
        cond_t = backbone.encode_prompt(spec.prompt_target)
        uncond = backbone.null_condition()
        slot_s = _object_slot_for(cond_s, spec.object_word)
        alignment = align_prompts(spec.prompt_source, spec.prompt_target)
        spec.energy.validate(spec.T)
        spec.npml.validate(spec.T)
    except StageError:
        raise
    except Exception as exc:
        emit({"stage": "setup", "error": str(exc)})
        raise StageError("setup", exc)

    # ---- stage 1: inversion ------------------------------------------------
    try:
        if trajectory is None:
            trajectory = ddpm_invert(backbone, image, cond_s, seed=spec.seed,
                                     cfg_scale=spec.cfg_scale_1)
            emit({"stage": "invert", "t": trajectory.T, "cached": False})
        else:
            if trajectory.schedule_signature != backbone.schedule.signature():
                raise ValueError("cached trajectory has a different schedule")
            emit({"stage": "invert", "t": trajectory.T, "cached": True})
    except StageError:
        raise
    except Exception as exc:
        emit({"stage": "invert", "error": str(exc)})
        raise StageError("invert", exc)

    # ---- stage 2: noise-prior injection -------------------------------------
    try:
        if spec.mode == "paste":
            if source_trajectory is None:
                if spec.source_image_ref is None:
                    raise ValueError("paste mode without a source trajectory or image ref")
                src_img = load_image(spec.source_image_ref)
                source_trajectory = ddpm_invert(backbone, src_img, cond_s,
                                                seed=spec.seed,
                                                cfg_scale=spec.cfg_scale_1)
            if source_mask is None:
                if spec.source_mask_ref is None:
                    raise ValueError("paste mode without a source mask")
                source_mask = load_mask(spec.source_mask_ref)
            shift = spec.shift(source_trajectory, source_mask)
            if spec.dnp:
                injected = inject_paste_prior(trajectory, source_trajectory,
                                              masks.m_c, source_mask, shift)
            else:
                injected = trajectory
        else:
            shift = spec.shift()
            injected = (inject_noise_prior(trajectory, masks.m_c, shift)
                        if spec.dnp else trajectory)
        emit({"stage": "inject", "dnp": spec.dnp, "mode": spec.mode,
              "changed": not torch.equal(injected.noise_maps, trajectory.noise_maps)})
    except StageError:
        raise
    except Exception as exc:
        emit({"stage": "inject", "error": str(exc)})
        raise StageError("inject", exc)

    t_start = spec.T - spec.T_skip
    schedule = backbone.schedule
    sqrt_one_minus_ab = {t: float((1 - schedule.alpha_bar[t]) ** 0.5)
                         for t in range(1, spec.T + 1)}

    record = GuidanceRecord(mode=spec.control_mode, q_mask=masks.q,
                            window=(spec.energy.t_lo, spec.energy.t_hi))
    store = AttentionStore(alignment)
    trace = NpmlTrace()

    # ---- stage 3: moving-reconstruction branch ------------------------------
    try:
        cond_evolved = cond_s
        state = injected.state(t_start)
        for t in range(t_start, 0, -1):
            if spec.npml_on and spec.npml.active(t) and spec.npml.inner_steps > 0:
                cond_evolved = optimize_object_embedding(
                    backbone, cond_evolved, slot_s, state, t, masks.m_c,
                    spec.npml, trace)
            with torch.no_grad():
                eps_c, capture = backbone.predict_noise(state, t, cond_evolved,
                                                        capture=True)
                store.put(t, capture)
                eps_u, _ = backbone.predict_noise(state, t, uncond)
                eps = cfg_combine(eps_u, eps_c, spec.cfg_scale_1)
            metrics = {}
            if spec.energy.guides(t):
                g = compute_guidance(
                    backbone, state, t, cond_evolved,
                    ref_state=trajectory.states[t], ref_cond=cond_s,
                    masks=masks, shift=spec.shift(), config=spec.energy,
                    merge_inpaint_into_content=not spec.dref)
                if spec.ggs:
                    store_guidance(record, t, g)
                eps = eps + sqrt_one_minus_ab[t] * g
                metrics["guidance_norm"] = float(torch.linalg.vector_norm(g))
            if t in trace.losses_before:
                metrics["npml_before"] = trace.losses_before[t]
                metrics["npml_after"] = trace.losses_after[t]
            with torch.no_grad():
                x0_pred = predicted_x0(schedule, state.data, eps, t)
                state = reverse_step(schedule, state, t, eps, z=injected.z(t))
            emit({"stage": "branch1", "t": t, "metrics": metrics,
                  "x0_preview": x0_pred})
        branch1 = state.data.clamp(-1, 1)
        record.seal()
        store.seal()
    except StageError:
        raise
    except Exception as exc:
        emit({"stage": "branch1", "error": str(exc)})
        raise StageError("branch1", exc)

    # ---- stage 4: text-driven editing branch --------------------------------
    try:
        # carry the learned object concept to the aligned target word
        target_obj_slot = None
        for i_s, j_t in alignment.pairs:
            if i_s == slot_s:
                target_obj_slot = j_t
        control_layers = backbone.config.capture_layers
        one_minus_q = 1.0 - masks.q
        state = injected.state(t_start)
        # the object embedding evolves cumulatively in branch 1; replay the
        # same per-step embedding here, carrying the last snapshot downward
        current_snapshot = None
        with torch.no_grad():
            for t in range(t_start, 0, -1):
                if trace.snapshot_for(t) is not None:
                    current_snapshot = trace.snapshot_for(t)
                cond_step = cond_t
                if (spec.npml_on and target_obj_slot is not None
                        and current_snapshot is not None):
                    cond_step = cond_t.with_slot(target_obj_slot,
                                                 current_snapshot)
                if spec.control_mode == "cross_attn":
                    overrides = cross_attention_control(
                        store, t, t_start, spec.tau_cross, control_layers)
                elif spec.control_mode == "mutual_self_attn":
                    overrides = mutual_self_attention_control(
                        store, t, t_start, spec.self_attn_start, control_layers)
                else:
                    overrides = None
                if overrides is not None and not overrides:
                    overrides = None
                eps_c, _ = backbone.predict_noise(state, t, cond_step,
                                                  overrides=overrides)
                eps_u, _ = backbone.predict_noise(state, t, uncond)
                eps = cfg_combine(eps_u, eps_c, spec.cfg_scale_2)
                metrics = {}
                if spec.ggs:
                    g = fetch_guidance(record, t)
                    if g is not None:
                        if spec.control_mode == "mutual_self_attn":
                            g = g * one_minus_q
                        eps = eps + sqrt_one_minus_ab[t] * g
                        metrics["guidance_norm"] = float(torch.linalg.vector_norm(g))
                x0_pred = predicted_x0(schedule, state.data, eps, t)
                state = reverse_step(schedule, state, t, eps, z=injected.z(t))
                emit({"stage": "branch2", "t": t, "metrics": metrics,
                      "x0_preview": x0_pred})
        branch2 = state.data.clamp(-1, 1)
    except StageError:
        raise
    except Exception as exc:
        emit({"stage": "branch2", "error": str(exc)})
        raise StageError("branch2", exc)

    emit({"stage": "done"})
    return EditResult(branch1=branch1, branch2=branch2, log=log, masks=masks,
                      guidance_record=record if spec.ggs else None,
                      attention_store=store, npml_trace=trace,
                      trajectory=trajectory, injected_trajectory=injected)


def run_paste(backbone: ToyBackbone, spec: EditSpec, **kwargs) -> EditResult:
    """run_edit with the paste-mode precondition enforced."""
    if spec.mode != "paste":
        raise ValueError("run_paste requires spec.drag.mode == 'paste'")
    return run_edit(backbone, spec, **kwargs)


def progress_stream(job_dir) -> Iterator[dict]:
    """Ordered events of a (possibly completed) job from its log file."""
    path = Path(job_dir) / "log.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"unknown job: no log at {path}")
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
