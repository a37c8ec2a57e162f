"""Non-target position mask learning.

During the reconstruction branch's guided steps, the moved object's word
embedding is optimized so that its aggregated cross-attention mass stays
inside the target-region mask: the loss is a cosine alignment between the
attention map and the mask complement plus the fraction of attention mass
falling outside the mask. The embedding evolves cumulatively across timesteps,
and per-step snapshots let the editing branch use the same object concept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch

from .backbone import AttentionCapture, ConditionEmbedding, LatentState, ToyBackbone
from .errors import GuidanceError, MaskError, ShapeMismatchError
from .masks import as_binary_mask


@dataclass(frozen=True)
class NpmlConfig:
    lambda_c: float = 0.5
    lambda_i: float = 0.5
    inner_steps: int = 3
    step_size: float = 1e-2
    resolution: int = 16
    layers: Tuple[str, ...] = ("enc16", "dec16")
    t_lo: int = 30
    t_hi: int = 80

    def validate(self, T: int) -> None:
        if self.lambda_c < 0 or self.lambda_i < 0:
            raise ValueError("lambda_c and lambda_i must be >= 0")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if not 1 <= self.t_lo <= self.t_hi <= T:
            raise ValueError(f"window [{self.t_lo}, {self.t_hi}] outside [1, {T}]")

    def active(self, t: int) -> bool:
        return self.t_lo <= t <= self.t_hi


def aggregate_object_attention(capture: AttentionCapture, slot: int,
                               resolution: int,
                               layers: Optional[Iterable[str]] = None
                               ) -> torch.Tensor:
    """Mean over layers at one resolution of a token slot's cross-attention map."""
    maps = []
    for (layer_id, token), m in capture.cross_maps.items():
        if token != slot or m.shape[-1] != resolution:
            continue
        if layers is not None and layer_id not in layers:
            continue
        maps.append(m)
    if not maps:
        raise ValueError(f"no cross-attention map for slot {slot} at {resolution}x{resolution}")
    return torch.stack(maps).mean(dim=0)


def npml_loss(attention: torch.Tensor, m_c: torch.Tensor,
              lambda_c: float, lambda_i: float) -> torch.Tensor:
    """lambda_c * cos(vec(A), vec(1 - M_c)) + lambda_i * mass(A outside M_c).

    Zero iff every unit of attention mass lies inside the mask; invariant to
    uniform positive rescaling of A. Cosine against a zero vector is 0.
    """
    if attention.shape != m_c.shape:
        raise ShapeMismatchError(
            f"attention {tuple(attention.shape)} vs mask {tuple(m_c.shape)}")
    if (attention < 0).any():
        raise ValueError("attention map must be nonnegative")
    m_c = as_binary_mask(m_c).to(attention.dtype)
    total = attention.sum()
    if total.item() == 0.0:
        raise ValueError("attention map sums to zero (vacuous attention)")
    outside = (1.0 - m_c).reshape(-1)
    a = attention.reshape(-1)
    n_out = torch.linalg.vector_norm(outside)
    if n_out.item() == 0.0:
        cos = torch.zeros((), dtype=attention.dtype)
    else:
        cos = (a @ outside) / (torch.linalg.vector_norm(a) * n_out)
    mass_outside = (a @ outside) / total
    return lambda_c * cos + lambda_i * mass_outside


@dataclass
class NpmlTrace:
    """Per-timestep record: loss before/after and the embedding snapshot."""
    losses_before: Dict[int, float] = field(default_factory=dict)
    losses_after: Dict[int, float] = field(default_factory=dict)
    snapshots: Dict[int, torch.Tensor] = field(default_factory=dict)

    def snapshot_for(self, t: int) -> Optional[torch.Tensor]:
        return self.snapshots.get(t)


def optimize_object_embedding(backbone: ToyBackbone, cond: ConditionEmbedding,
                              slot: int, state: LatentState, t: int,
                              m_c: torch.Tensor, config: NpmlConfig,
                              trace: Optional[NpmlTrace] = None
                              ) -> ConditionEmbedding:
    """Gradient-descend the one object-word embedding to pull its attention
    inside M_c; every other slot is bitwise untouched.

    Returns a new ConditionEmbedding; records before/after losses and the
    post-update snapshot in ``trace`` when given.
    """
    config.validate(backbone.config.T)
    if slot not in cond.editable_slots:
        raise ValueError(f"slot {slot} is not an editable object slot")
    if not config.active(t):
        raise ValueError(f"t={t} outside window [{config.t_lo}, {config.t_hi}]")
    m_c_res = m_c
    if m_c.shape[-1] != config.resolution:
        from .masks import downsample_mask
        m_c_res = downsample_mask(m_c, config.resolution)
    if m_c_res.sum() == 0:
        raise MaskError(f"target mask empty at {config.resolution}x{config.resolution}")

    layer_req = [l for l in config.layers
                 if backbone.config.layer_resolution(l) == config.resolution]
    if not layer_req:
        raise ValueError(f"no configured layer at resolution {config.resolution}")

    emb = cond.token_embeddings.detach().clone()
    slot_vec = emb[slot].clone().requires_grad_(True)

    def loss_at(vec: torch.Tensor) -> torch.Tensor:
        full = torch.cat([emb[:slot], vec[None], emb[slot + 1:]], dim=0)
        probe = ConditionEmbedding(full, cond.token_to_word, cond.editable_slots, cond.words)
        _, capture = backbone.predict_noise(state, t, probe, capture=layer_req)
        att = aggregate_object_attention(capture, slot, config.resolution, layer_req)
        return npml_loss(att, m_c_res, config.lambda_c, config.lambda_i)

    before = loss_at(slot_vec)
    if not torch.isfinite(before):
        raise GuidanceError(f"non-finite attention loss at t={t}")
    if trace is not None:
        trace.losses_before[t] = float(before.detach())

    loss = before
    for _ in range(config.inner_steps):
        (g,) = torch.autograd.grad(loss, slot_vec)
        if not torch.isfinite(g).all():
            raise GuidanceError(f"non-finite embedding gradient at t={t}")
        slot_vec = (slot_vec.detach() - config.step_size * g).requires_grad_(True)
        loss = loss_at(slot_vec)
        if not torch.isfinite(loss):
            raise GuidanceError(f"non-finite attention loss at t={t}")

    out = cond.with_slot(slot, slot_vec.detach())
    if trace is not None:
        trace.losses_after[t] = float(loss.detach())
        trace.snapshots[t] = slot_vec.detach().clone()
    return out


def object_slot(cond: ConditionEmbedding) -> int:
    """The single editable object-word slot; errors if absent or ambiguous."""
    slots = sorted(cond.editable_slots)
    if not slots:
        raise ValueError("prompt has no object word to optimize")
    return slots[-1]
