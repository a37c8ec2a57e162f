"""Edit-friendly DDPM inversion and noise-prior injection.

Inversion builds every intermediate state by *independent* forward noising
(x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps_t with a fresh eps_t per step),
then solves each reverse step for the noise map z_t that reproduces the chain
exactly:  z_t = (x_{t-1} - mu_t(x_t)) / sigma_t.  Replaying the reverse process
with these maps reconstructs the input to floating-point accuracy.

Dragging and pasting act purely on the noise maps (never the states): inside
the target mask the maps are replaced by integer-shifted copies of themselves
(drag) or of a second trajectory (paste).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import ConditionEmbedding, LatentState, ToyBackbone, cfg_combine
from .errors import (InversionError, MaskError, ScheduleMismatchError,
                     ShapeMismatchError)
from .masks import as_binary_mask
from .schedule import NoiseSchedule

TRAJECTORY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ShiftSpec:
    """Integer drag offset in native pixels; positive dx = right, dy = down."""
    dx: int
    dy: int
    mode: str = "drag"  # "drag" | "paste"
    source_trajectory: Optional["NoiseTrajectory"] = None
    source_mask: Optional[torch.Tensor] = None

    def validate(self, height: int, width: int) -> None:
        if self.mode not in ("drag", "paste"):
            raise ValueError(f"unknown shift mode {self.mode!r}")
        if abs(self.dx) >= width or abs(self.dy) >= height:
            raise ValueError(
                f"shift ({self.dx}, {self.dy}) must be smaller than the canvas "
                f"({width}x{height})")
        if self.mode == "paste" and (self.source_trajectory is None or self.source_mask is None):
            raise ValueError("paste mode requires a source trajectory and source mask")


@dataclass
class NoiseTrajectory:
    """Stored inversion output: states x_0..x_T and noise maps z_1..z_T.

    ``states[t]`` is x_t ([C, H, W]); ``noise_maps[t-1]`` is z_t, the exact
    per-step noise that carries x_t to x_{t-1} under the recorded conditioning.
    Immutable by convention: injection ops return new trajectories.
    """
    states: torch.Tensor          # [T+1, C, H, W]
    noise_maps: torch.Tensor      # [T, C, H, W]
    prompt: str
    cfg_scale: float
    seed: int
    schedule_signature: dict
    t_skip: int = 0

    @property
    def T(self) -> int:
        return int(self.noise_maps.shape[0])

    def state(self, t: int) -> LatentState:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return LatentState(self.states[t], t)

    def z(self, t: int) -> torch.Tensor:
        if not 1 <= t <= self.T:
            raise ValueError(f"z_t defined for t in [1, {self.T}], got {t}")
        return self.noise_maps[t - 1]

    def with_noise_maps(self, noise_maps: torch.Tensor) -> "NoiseTrajectory":
        if noise_maps.shape != self.noise_maps.shape:
            raise ShapeMismatchError(
                f"noise map stack shape {tuple(noise_maps.shape)} != "
                f"{tuple(self.noise_maps.shape)}")
        return dataclasses.replace(self, noise_maps=noise_maps)

    def check_compatible(self, other: "NoiseTrajectory") -> None:
        if self.schedule_signature != other.schedule_signature:
            raise ScheduleMismatchError(
                f"trajectories use different schedules: "
                f"{self.schedule_signature} vs {other.schedule_signature}")
        if self.states.shape != other.states.shape:
            raise ShapeMismatchError(
                f"trajectory resolutions differ: {tuple(self.states.shape)} vs "
                f"{tuple(other.states.shape)}")


def reverse_step(schedule: NoiseSchedule, state: LatentState, t: int,
                 noise_prediction: torch.Tensor, z: Optional[torch.Tensor] = None,
                 generator: Optional[torch.Generator] = None) -> LatentState:
    """One reverse diffusion step: x_{t-1} = mu_t(x_t, eps_hat) + sigma_t * z.

    Uses the stored noise map when given, otherwise samples fresh (or steps
    deterministically when sigma_t = 0).
    """
    if t < 1:
        raise ValueError(f"reverse_step requires t >= 1, got {t}")
    if state.timestep_index != t:
        raise ValueError(f"state is at t={state.timestep_index}, step asked for t={t}")
    if noise_prediction.shape != state.data.shape:
        raise ShapeMismatchError(
            f"noise prediction shape {tuple(noise_prediction.shape)} != state "
            f"{tuple(state.data.shape)}")
    mean = schedule.posterior_mean(state.data, noise_prediction, t)
    sigma = schedule.sigma(t)
    if sigma == 0.0:
        return LatentState(mean, t - 1)
    if z is None:
        z = torch.randn(state.data.shape, generator=generator, dtype=state.data.dtype)
    return LatentState(mean + sigma * z, t - 1)


def ddpm_invert(backbone: ToyBackbone, image: torch.Tensor, cond: ConditionEmbedding,
                seed: int, cfg_scale: float = 3.5,
                uncond: Optional[ConditionEmbedding] = None) -> NoiseTrajectory:
    """Extract the edit-friendly noise maps of ``image`` under ``cond``.

    The classifier-free-guided noise prediction (same ``cfg_scale`` the
    reconstruction branch will use) defines the reverse-step means that the
    noise maps are solved against.
    """
    config = backbone.config
    schedule = backbone.schedule
    x0 = image.float()
    LatentState(x0, 0).validate(config)
    lo, hi = float(x0.min()), float(x0.max())
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"image values [{lo:.3f}, {hi:.3f}] outside model range [-1, 1]")
    if uncond is None:
        uncond = backbone.null_condition()

    T = config.T
    gen = torch.Generator().manual_seed(seed)
    states = torch.empty((T + 1,) + tuple(x0.shape), dtype=torch.float32)
    states[0] = x0
    drawn = torch.randn((T,) + tuple(x0.shape), generator=gen)
    for t in range(1, T + 1):
        states[t] = schedule.q_sample(x0, t, drawn[t - 1])

    noise_maps = torch.empty((T,) + tuple(x0.shape), dtype=torch.float32)
    with torch.no_grad():
        for t in range(T, 0, -1):
            x_t = LatentState(states[t], t)
            eps_c, _ = backbone.predict_noise(x_t, t, cond)
            eps_u, _ = backbone.predict_noise(x_t, t, uncond)
            eps = cfg_combine(eps_u, eps_c, cfg_scale)
            if not torch.isfinite(eps).all():
                raise InversionError(f"non-finite noise prediction at t={t}")
            mean = schedule.posterior_mean(states[t], eps, t)
            sigma = schedule.sigma(t)
            if sigma == 0.0:
                raise InversionError(
                    f"sigma_t = 0 at t={t}: noise map undefined; use the "
                    f"'large' sigma mode for inversion")
            z = (states[t - 1] - mean) / sigma
            noise_maps[t - 1] = z
            # re-derive x_{t-1} through the same arithmetic a replay will use,
            # so reconstruction is exact rather than merely close
            states[t - 1] = mean + sigma * z

    return NoiseTrajectory(
        states=states, noise_maps=noise_maps,
        prompt=" ".join(cond.words), cfg_scale=float(cfg_scale), seed=int(seed),
        schedule_signature=schedule.signature(),
    )


def _shift_remap(maps: torch.Tensor, m_c: torch.Tensor, dx: int, dy: int,
                 source_maps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Replace maps inside m_c by (source or own) values shifted by (dx, dy).

    A position p inside m_c takes the value at p - (dx, dy); positions whose
    shift source is off-canvas keep the original value. ``maps`` is [..., H, W].
    """
    h, w = maps.shape[-2], maps.shape[-1]
    src = source_maps if source_maps is not None else maps
    ys, xs = torch.nonzero(m_c, as_tuple=True)
    sy, sx = ys - dy, xs - dx
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    if not bool(ok.any()):
        raise MaskError(
            "shift source for every target-mask position is off canvas; "
            "the drag exceeds the allowed displacement")
    out = maps.clone()
    out[..., ys[ok], xs[ok]] = src[..., sy[ok], sx[ok]]
    return out


def inject_noise_prior(traj: NoiseTrajectory, m_c: torch.Tensor,
                       shift: ShiftSpec) -> NoiseTrajectory:
    """Drag prior: z_t <- (1 - M_c) * z_t + M_c * shift(z_t, dx, dy) for all t.

    Only the noise maps change; the stored states are untouched.
    """
    if shift.mode != "drag":
        raise ValueError(f"inject_noise_prior requires drag mode, got {shift.mode!r}")
    h, w = traj.noise_maps.shape[-2], traj.noise_maps.shape[-1]
    shift.validate(h, w)
    m_c = as_binary_mask(m_c)
    if m_c.shape != (h, w):
        raise ShapeMismatchError(f"mask {tuple(m_c.shape)} vs noise maps {h}x{w}")
    if m_c.sum() == 0 or (shift.dx == 0 and shift.dy == 0):
        return traj.with_noise_maps(traj.noise_maps.clone())
    return traj.with_noise_maps(
        _shift_remap(traj.noise_maps, m_c, shift.dx, shift.dy))


def inject_paste_prior(traj_target: NoiseTrajectory, traj_source: NoiseTrajectory,
                       m_c: torch.Tensor, source_mask: torch.Tensor,
                       shift: ShiftSpec) -> NoiseTrajectory:
    """Paste prior: inside M_c pull shifted noise maps from a second trajectory."""
    traj_target.check_compatible(traj_source)
    h, w = traj_target.noise_maps.shape[-2], traj_target.noise_maps.shape[-1]
    shift.validate(h, w)
    m_c = as_binary_mask(m_c)
    source_mask = as_binary_mask(source_mask)
    if m_c.shape != (h, w) or source_mask.shape != (h, w):
        raise ShapeMismatchError("masks must match the trajectory resolution")
    if m_c.sum() == 0:
        return traj_target.with_noise_maps(traj_target.noise_maps.clone())
    return traj_target.with_noise_maps(
        _shift_remap(traj_target.noise_maps, m_c, shift.dx, shift.dy,
                     source_maps=traj_source.noise_maps))


def replay(backbone: ToyBackbone, traj: NoiseTrajectory,
           cond: Optional[ConditionEmbedding] = None,
           cfg_scale: Optional[float] = None, t_start: Optional[int] = None,
           uncond: Optional[ConditionEmbedding] = None) -> torch.Tensor:
    """Run the reverse process from the stored x_{t_start} with stored noise maps.

    With the trajectory's own conditioning and no edits this reproduces x_0.
    """
    schedule = backbone.schedule
    if schedule.signature() != traj.schedule_signature:
        raise ScheduleMismatchError(
            f"backbone schedule {schedule.signature()} != trajectory "
            f"{traj.schedule_signature}")
    if cond is None:
        cond = backbone.encode_prompt(traj.prompt)
    if uncond is None:
        uncond = backbone.null_condition()
    scale = traj.cfg_scale if cfg_scale is None else cfg_scale
    t0 = traj.T if t_start is None else t_start
    if not 0 <= t0 <= traj.T:
        raise ValueError(f"t_start={t0} outside [0, {traj.T}]")
    state = traj.state(t0)
    with torch.no_grad():
        for t in range(t0, 0, -1):
            eps_c, _ = backbone.predict_noise(state, t, cond)
            eps_u, _ = backbone.predict_noise(state, t, uncond)
            eps = cfg_combine(eps_u, eps_c, scale)
            state = reverse_step(schedule, state, t, eps, z=traj.z(t))
    return state.data


# -- persistence -----------------------------------------------------------

def save_trajectory(traj: NoiseTrajectory, path) -> None:
    """Versioned .npz archive of all states, noise maps, and metadata."""
    meta = {
        "format_version": TRAJECTORY_FORMAT_VERSION,
        "prompt": traj.prompt,
        "cfg_scale": traj.cfg_scale,
        "seed": traj.seed,
        "schedule_signature": traj.schedule_signature,
        "t_skip": traj.t_skip,
    }
    np.savez_compressed(
        path,
        states=traj.states.numpy(),
        noise_maps=traj.noise_maps.numpy(),
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
    )


def load_trajectory(path) -> NoiseTrajectory:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"].tobytes()).decode())
        if meta.get("format_version") != TRAJECTORY_FORMAT_VERSION:
            raise ValueError(f"unsupported trajectory format {meta.get('format_version')}")
        return NoiseTrajectory(
            states=torch.from_numpy(blob["states"].copy()),
            noise_maps=torch.from_numpy(blob["noise_maps"].copy()),
            prompt=meta["prompt"], cfg_scale=meta["cfg_scale"], seed=meta["seed"],
            schedule_signature=meta["schedule_signature"], t_skip=meta["t_skip"],
        )
