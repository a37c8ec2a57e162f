"""Energy-based gradient guidance.

Three cosine feature-matching energies (edit / content / inpaint) are
differentiated through the denoiser's feature extraction with respect to the
current latent, scaled per term, composed regionally, and norm-clipped. The
reconstruction branch stores each step's composed gradient in a GuidanceRecord
that the editing branch replays unmodified.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .backbone import ConditionEmbedding, LatentState, ToyBackbone
from .errors import GuidanceError, ShapeMismatchError
from .inversion import ShiftSpec
from .masks import RegionMasks, as_binary_mask

GUIDANCE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnergyConfig:
    """Per-term gradient scales, feature layer, guided window, clip norm."""
    m_edit: float = 1.0
    m_content: float = 1.0
    m_inpaint: float = 2.0
    feature_layer: str = "dec16"
    t_lo: int = 30
    t_hi: int = 80
    clip_norm: float = 1.0

    def validate(self, T: int) -> None:
        for name in ("m_edit", "m_content", "m_inpaint"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise GuidanceError(f"{name} must be finite and >= 0, got {v}")
        if not 1 <= self.t_lo <= self.t_hi <= T:
            raise GuidanceError(
                f"guided window [{self.t_lo}, {self.t_hi}] outside [1, {T}]")
        if not np.isfinite(self.clip_norm) or self.clip_norm <= 0:
            raise GuidanceError(f"clip_norm must be positive, got {self.clip_norm}")

    def guides(self, t: int) -> bool:
        return self.t_lo <= t <= self.t_hi


def _flat_cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of two flattened vectors; zero vector on either side -> 0."""
    u, v = u.reshape(-1), v.reshape(-1)
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu.item() == 0.0 or nv.item() == 0.0:
        return torch.zeros((), dtype=u.dtype)
    return (u @ v) / (nu * nv)


def _paired_positions(m_c: torch.Tensor, dx_f: int, dy_f: int
                      ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Target positions inside m_c and their shift-back sources, in-bounds only."""
    h, w = m_c.shape
    ys, xs = torch.nonzero(m_c, as_tuple=True)
    sy, sx = ys - dy_f, xs - dx_f
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    return ys[ok], xs[ok], sy[ok], sx[ok]


def feature_shift(shift: ShiftSpec, native_resolution: int, feature_resolution: int
                  ) -> Tuple[int, int]:
    """Drag offset expressed in feature-grid cells (rounded)."""
    s = feature_resolution / native_resolution
    return int(round(shift.dx * s)), int(round(shift.dy * s))


def energy_edit(feat: torch.Tensor, ref_feat: torch.Tensor, masks: RegionMasks,
                shift: ShiftSpec) -> torch.Tensor:
    """1 - cosine between target-region features and the source object's
    reference features translated into alignment. Zero iff they match."""
    if feat.shape != ref_feat.shape:
        raise ShapeMismatchError(
            f"feature shapes differ: {tuple(feat.shape)} vs {tuple(ref_feat.shape)}")
    res = feat.shape[-1]
    m_c = masks.at(res)["m_c"]
    if m_c.sum() == 0:
        raise GuidanceError(
            f"target mask has no support at {res}x{res} features; use a capture "
            f"layer with higher spatial resolution or a larger mask")
    dx_f, dy_f = feature_shift(shift, masks.m_c.shape[-1], res)
    ys, xs, sy, sx = _paired_positions(m_c, dx_f, dy_f)
    if ys.numel() == 0:
        raise GuidanceError(
            f"no in-bounds source positions for the target mask at {res}x{res}; "
            f"use a capture layer with higher spatial resolution or a larger mask")
    return 1.0 - _flat_cosine(feat[:, ys, xs], ref_feat[:, sy, sx])


def energy_content(feat: torch.Tensor, ref_feat: torch.Tensor,
                   region: torch.Tensor) -> torch.Tensor:
    """1 - cosine over the same region of both feature maps; empty region -> 0."""
    if feat.shape != ref_feat.shape:
        raise ShapeMismatchError(
            f"feature shapes differ: {tuple(feat.shape)} vs {tuple(ref_feat.shape)}")
    region = as_binary_mask(region)
    if region.shape != feat.shape[-2:]:
        raise ShapeMismatchError(
            f"region {tuple(region.shape)} vs features {tuple(feat.shape[-2:])}")
    ys, xs = torch.nonzero(region, as_tuple=True)
    if ys.numel() == 0:
        return torch.zeros((), dtype=feat.dtype)
    return 1.0 - _flat_cosine(feat[:, ys, xs], ref_feat[:, ys, xs])


def vacated_region(masks: RegionMasks, resolution: int) -> torch.Tensor:
    """M_v minus M_c at the given pyramid resolution."""
    level = masks.at(resolution)
    return (level["m_v"] * (1.0 - level["m_c"])).float()


def energy_inpaint(feat: torch.Tensor, ref_feat_object: torch.Tensor,
                   ref_feat_prior: torch.Tensor, masks: RegionMasks) -> torch.Tensor:
    """Vacated-region energy: contrast (+cosine to the original object features,
    penalizing residual object) plus fill (1 - cosine to the background
    reference). Empty vacated region -> 0 (no constraint)."""
    for other in (ref_feat_object, ref_feat_prior):
        if feat.shape != other.shape:
            raise ShapeMismatchError(
                f"feature shapes differ: {tuple(feat.shape)} vs {tuple(other.shape)}")
    region = vacated_region(masks, feat.shape[-1])
    ys, xs = torch.nonzero(region, as_tuple=True)
    if ys.numel() == 0:
        return torch.zeros((), dtype=feat.dtype)
    u = feat[:, ys, xs]
    contrast = _flat_cosine(u, ref_feat_object[:, ys, xs])
    fill = 1.0 - _flat_cosine(u, ref_feat_prior[:, ys, xs])
    return contrast + fill


def build_inpaint_reference(ref_feat: torch.Tensor, masks: RegionMasks) -> torch.Tensor:
    """Background-fill reference: the source features with the object region
    replaced by the mean feature vector of everything outside M_v and M_c."""
    res = ref_feat.shape[-1]
    level = masks.at(res)
    outside = (1.0 - torch.maximum(level["m_v"], level["m_c"]))
    ys, xs = torch.nonzero(outside, as_tuple=True)
    if ys.numel() == 0:
        raise GuidanceError("no background positions left to build the fill reference")
    mean_bg = ref_feat[:, ys, xs].mean(dim=1)
    out = ref_feat.clone()
    oy, ox = torch.nonzero(level["m_v"], as_tuple=True)
    out[:, oy, ox] = mean_bg[:, None]
    return out


def compose_regional_gradient(g_edit: torch.Tensor, g_inpaint: torch.Tensor,
                              g_content: torch.Tensor, masks: RegionMasks
                              ) -> torch.Tensor:
    """M_c * g_edit + M_v * g_inpaint + (1 - (M_c or M_v)) * g_content.

    Where M_c and M_v overlap both the edit and inpaint gradients contribute.
    """
    if not (g_edit.shape == g_inpaint.shape == g_content.shape):
        raise ShapeMismatchError("gradient fields must share one shape")
    if g_edit.shape[-2:] != masks.m_c.shape:
        raise ShapeMismatchError(
            f"gradients {tuple(g_edit.shape[-2:])} vs masks {tuple(masks.m_c.shape)}")
    m_c, m_v = masks.m_c, masks.m_v
    outside = 1.0 - torch.maximum(m_c, m_v)
    return m_c * g_edit + m_v * g_inpaint + outside * g_content


@dataclass
class GuidanceRecord:
    """Per-timestep composed gradients from branch 1, replayed by branch 2."""
    mode: str                      # "cross_attn" | "mutual_self_attn"
    q_mask: torch.Tensor
    window: Tuple[int, int]
    gradients: Dict[int, torch.Tensor] = field(default_factory=dict)
    sealed: bool = False

    def seal(self) -> None:
        self.sealed = True


def store_guidance(record: GuidanceRecord, t: int, g_t: torch.Tensor) -> None:
    if record.sealed:
        raise GuidanceError("record is sealed; the editing branch may not write")
    if t in record.gradients:
        raise GuidanceError(f"guidance already stored at t={t}")
    lo, hi = record.window
    if not lo <= t <= hi:
        raise GuidanceError(f"t={t} outside guided window [{lo}, {hi}]")
    if not torch.isfinite(g_t).all():
        raise GuidanceError(f"non-finite gradient at t={t}")
    record.gradients[t] = g_t.detach().clone()


def fetch_guidance(record: GuidanceRecord, t: int) -> Optional[torch.Tensor]:
    return record.gradients.get(t)


def save_guidance_record(record: GuidanceRecord, path) -> None:
    ts = sorted(record.gradients)
    meta = {
        "format_version": GUIDANCE_FORMAT_VERSION,
        "mode": record.mode, "window": list(record.window),
        "timesteps": ts, "sealed": record.sealed,
    }
    arrays = {f"g_{t}": record.gradients[t].numpy() for t in ts}
    np.savez_compressed(
        path, q_mask=record.q_mask.numpy(),
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_guidance_record(path) -> GuidanceRecord:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"].tobytes()).decode())
        if meta.get("format_version") != GUIDANCE_FORMAT_VERSION:
            raise ValueError(f"unsupported guidance format {meta.get('format_version')}")
        record = GuidanceRecord(
            mode=meta["mode"],
            q_mask=torch.from_numpy(blob["q_mask"].copy()),
            window=tuple(meta["window"]),
            gradients={t: torch.from_numpy(blob[f"g_{t}"].copy())
                       for t in meta["timesteps"]},
        )
        record.sealed = bool(meta["sealed"])
        return record


def compute_guidance(backbone: ToyBackbone, state: LatentState, t: int,
                     cond: ConditionEmbedding, ref_state: torch.Tensor,
                     ref_cond: ConditionEmbedding, masks: RegionMasks,
                     shift: ShiftSpec, config: EnergyConfig,
                     merge_inpaint_into_content: bool = False) -> torch.Tensor:
    """Composed, clipped energy gradient with respect to the current latent.

    Reference features come from the stored original-trajectory state at the
    same timestep. Terms with zero scale are skipped entirely. With
    ``merge_inpaint_into_content`` the dedicated vacated-region term is
    dropped and the content term covers everything outside the target region
    (the two-term form without region decoupling).
    """
    config.validate(backbone.config.T)
    if not config.guides(t):
        raise GuidanceError(f"t={t} outside guided window [{config.t_lo}, {config.t_hi}]")

    zeros = torch.zeros_like(state.data)
    if config.m_edit == config.m_content == config.m_inpaint == 0.0:
        return zeros

    with torch.no_grad():
        ref_feat = backbone.features(ref_state, t, ref_cond, config.feature_layer)
    x = state.data.detach().clone().requires_grad_(True)
    feat = backbone.features(x, t, cond, config.feature_layer)
    res = feat.shape[-1]

    def term_grad(energy: torch.Tensor, name: str) -> torch.Tensor:
        (g,) = torch.autograd.grad(energy, x, retain_graph=True, allow_unused=True)
        if g is None:
            return zeros
        if not torch.isfinite(g).all():
            raise GuidanceError(f"non-finite gradient from the {name} term at t={t}")
        return g

    g_edit = g_inpaint = g_content = zeros
    if config.m_edit > 0:
        g_edit = config.m_edit * term_grad(
            energy_edit(feat, ref_feat, masks, shift), "edit")
    if merge_inpaint_into_content:
        if config.m_content > 0:
            outside_c = 1.0 - masks.at(res)["m_c"]
            e_con = energy_content(feat, ref_feat, outside_c)
            if e_con.requires_grad:
                g_content = config.m_content * term_grad(e_con, "content")
        g = masks.m_c * g_edit + (1.0 - masks.m_c) * g_content
    else:
        if config.m_inpaint > 0:
            ref_prior = build_inpaint_reference(ref_feat, masks)
            e_inp = energy_inpaint(feat, ref_feat, ref_prior, masks)
            if e_inp.requires_grad:
                g_inpaint = config.m_inpaint * term_grad(e_inp, "inpaint")
        if config.m_content > 0:
            outside = 1.0 - torch.maximum(masks.at(res)["m_c"], masks.at(res)["m_v"])
            e_con = energy_content(feat, ref_feat, outside)
            if e_con.requires_grad:
                g_content = config.m_content * term_grad(e_con, "content")
        g = compose_regional_gradient(g_edit, g_inpaint, g_content, masks)
    norm = torch.linalg.vector_norm(g)
    if norm > config.clip_norm:
        g = g * (config.clip_norm / norm)
    return g.detach()
