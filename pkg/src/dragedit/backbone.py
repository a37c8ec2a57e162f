"""Pluggable conditional denoiser plus the small trainable toy model.

The toy model is a three-level UNet at 32x32 with single-head self- and
cross-attention at the 16x16 encoder, 8x8 encoder, and 16x16 decoder blocks.
Every attention block exposes its post-softmax cross-attention maps, its
self-attention keys/values (an injection point), and the decoder block also
exposes its output feature map for the energy functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InjectionError, ShapeMismatchError, VocabularyError
from .schedule import NoiseSchedule

DEFAULT_VOCAB = (
    "<null>", "a", "red", "green", "blue", "yellow",
    "circle", "square", "triangle", "big", "small", "shape",
)
OBJECT_WORDS = frozenset({"circle", "square", "triangle", "shape"})

ATTENTION_LAYERS = ("enc16", "enc8", "dec16")
FEATURE_LAYERS = ("dec16",)


@dataclass(frozen=True)
class BackboneConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    sigma_mode: str = "large"
    resolution: int = 32
    channels: int = 3
    vocab: tuple = DEFAULT_VOCAB
    cond_dim: int = 32
    time_dim: int = 96
    widths: tuple = (32, 48, 64)  # 32x32 / 16x16 / 8x8 levels
    capture_layers: tuple = ATTENTION_LAYERS
    feature_layer: str = "dec16"

    def schedule(self) -> NoiseSchedule:
        sched = NoiseSchedule.linear(self.T, self.beta_start, self.beta_end, self.sigma_mode)
        sched.validate()
        return sched

    def layer_resolution(self, layer_id: str) -> int:
        return {"enc16": 16, "enc8": 8, "dec16": 16}[layer_id]

    def to_dict(self) -> dict:
        return {
            "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
            "sigma_mode": self.sigma_mode, "resolution": self.resolution,
            "channels": self.channels, "vocab": list(self.vocab),
            "cond_dim": self.cond_dim, "time_dim": self.time_dim,
            "widths": list(self.widths), "capture_layers": list(self.capture_layers),
            "feature_layer": self.feature_layer,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        d["widths"] = tuple(d["widths"])
        d["capture_layers"] = tuple(d["capture_layers"])
        return cls(**d)


@dataclass
class LatentState:
    """Diffusing state: image-space array [C, H, W] plus its timestep index."""
    data: torch.Tensor
    timestep_index: int

    def validate(self, config: BackboneConfig) -> None:
        c, h, w = self.data.shape
        if (h, w) != (config.resolution, config.resolution) or c != config.channels:
            raise ShapeMismatchError(
                f"state shape {tuple(self.data.shape)} does not match model "
                f"({config.channels}, {config.resolution}, {config.resolution})")
        if not torch.isfinite(self.data).all():
            raise ValueError("state contains non-finite entries")
        if not 0 <= self.timestep_index <= config.T:
            raise ValueError(f"timestep_index {self.timestep_index} outside [0, {config.T}]")


@dataclass
class ConditionEmbedding:
    """Token embeddings [L, d], the token->word map, and which slots may be optimized."""
    token_embeddings: torch.Tensor
    token_to_word: dict
    editable_slots: frozenset
    words: tuple = ()

    def clone(self) -> "ConditionEmbedding":
        return ConditionEmbedding(
            token_embeddings=self.token_embeddings.detach().clone(),
            token_to_word=dict(self.token_to_word),
            editable_slots=self.editable_slots,
            words=self.words,
        )

    def with_slot(self, slot: int, embedding: torch.Tensor) -> "ConditionEmbedding":
        out = self.clone()
        out.token_embeddings[slot] = embedding
        return out


@dataclass
class AttentionCapture:
    """Per-layer attention payloads captured during one denoiser call."""
    cross_maps: dict = field(default_factory=dict)   # (layer_id, token) -> [h, w]
    self_kv: dict = field(default_factory=dict)      # layer_id -> (K [hw, d], V [hw, d])
    features: dict = field(default_factory=dict)     # layer_id -> [c, h, w]

    def detached(self) -> "AttentionCapture":
        return AttentionCapture(
            cross_maps={k: v.detach().clone() for k, v in self.cross_maps.items()},
            self_kv={k: (kv[0].detach().clone(), kv[1].detach().clone())
                     for k, kv in self.self_kv.items()},
            features={k: v.detach().clone() for k, v in self.features.items()},
        )


@dataclass
class AttentionOverrides:
    """Injection payloads for one denoiser call.

    ``self_kv`` replaces a layer's self-attention keys/values; ``cross_map``
    holds callables that rewrite a layer's post-softmax cross-attention
    probabilities ([hw, L] -> [hw, L], rows must stay normalized).
    """
    self_kv: dict = field(default_factory=dict)
    cross_map: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.self_kv) or bool(self.cross_map)


def cfg_combine(noise_uncond: torch.Tensor, noise_cond: torch.Tensor,
                scale: float) -> torch.Tensor:
    """Classifier-free guidance mix: uncond + scale * (cond - uncond)."""
    if noise_uncond.shape != noise_cond.shape:
        raise ShapeMismatchError(
            f"cfg shapes differ: {tuple(noise_uncond.shape)} vs {tuple(noise_cond.shape)}")
    return noise_uncond + scale * (noise_cond - noise_uncond)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        angles = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention followed by cross-attention over the tokens."""

    def __init__(self, layer_id: str, ch: int, cond_dim: int):
        super().__init__()
        self.layer_id = layer_id
        self.ch = ch
        self.norm_self = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.proj_self = nn.Linear(ch, ch)
        self.norm_cross = nn.GroupNorm(8, ch)
        self.to_q_cross = nn.Linear(ch, ch, bias=False)
        self.to_k_cross = nn.Linear(cond_dim, ch, bias=False)
        self.to_v_cross = nn.Linear(cond_dim, ch, bias=False)
        self.proj_cross = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor,
                capture: Optional[AttentionCapture],
                overrides: Optional[AttentionOverrides]) -> torch.Tensor:
        b, c, h, w = x.shape
        scale = 1.0 / math.sqrt(c)

        # self-attention
        hs = self.norm_self(x).reshape(b, c, h * w).permute(0, 2, 1)  # [b, hw, c]
        q = self.to_q(hs)
        k_own, v_own = self.to_k(hs), self.to_v(hs)
        k, v = k_own, v_own
        if overrides is not None and self.layer_id in overrides.self_kv:
            k_inj, v_inj = overrides.self_kv[self.layer_id]
            if k_inj.shape != k_own.shape[1:] or v_inj.shape != v_own.shape[1:]:
                raise InjectionError(
                    f"self-attention K/V for layer {self.layer_id} must have shape "
                    f"{tuple(k_own.shape[1:])}, got {tuple(k_inj.shape)}/{tuple(v_inj.shape)}")
            k = k_inj.unsqueeze(0).expand_as(k_own)
            v = v_inj.unsqueeze(0).expand_as(v_own)
        attn = torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1)
        out = self.proj_self(attn @ v)
        x = x + out.permute(0, 2, 1).reshape(b, c, h, w)
        if capture is not None:
            # own (pre-override) K/V so that re-injecting them is the identity
            capture.self_kv[self.layer_id] = (k_own[0], v_own[0])

        # cross-attention over tokens [b, L, d_cond]
        hc = self.norm_cross(x).reshape(b, c, h * w).permute(0, 2, 1)
        qc = self.to_q_cross(hc)
        kc, vc = self.to_k_cross(tokens), self.to_v_cross(tokens)
        probs = torch.softmax(qc @ kc.transpose(1, 2) * scale, dim=-1)  # [b, hw, L]
        if overrides is not None and self.layer_id in overrides.cross_map:
            probs = overrides.cross_map[self.layer_id](probs[0]).unsqueeze(0)
        out = self.proj_cross(probs @ vc)
        x = x + out.permute(0, 2, 1).reshape(b, c, h, w)
        if capture is not None:
            # effective (post-override) maps, one [h, w] plane per token
            for j in range(probs.shape[-1]):
                capture.cross_maps[(self.layer_id, j)] = probs[0, :, j].reshape(h, w)
        return x


class TinyUNet(nn.Module):
    """32x32 three-level conditional UNet predicting the forward noise."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        c0, c1, c2 = config.widths
        tdim = config.time_dim
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(tdim), nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.token_table = nn.Embedding(len(config.vocab), config.cond_dim)

        self.conv_in = nn.Conv2d(config.channels, c0, 3, padding=1)
        self.down1 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)   # 32 -> 16
        self.res_enc16 = ResBlock(c0, c1, tdim)
        self.attn_enc16 = AttentionBlock("enc16", c1, config.cond_dim)
        self.down2 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)   # 16 -> 8
        self.res_enc8 = ResBlock(c1, c2, tdim)
        self.attn_enc8 = AttentionBlock("enc8", c2, config.cond_dim)
        self.res_mid = ResBlock(c2, c2, tdim)
        self.res_dec16 = ResBlock(c2 + c1, c1, tdim)             # after 8 -> 16 upsample
        self.attn_dec16 = AttentionBlock("dec16", c1, config.cond_dim)
        self.res_dec32 = ResBlock(c1 + c0, c0, tdim)             # after 16 -> 32 upsample
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, config.channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor,
                capture: Optional[AttentionCapture] = None,
                overrides: Optional[AttentionOverrides] = None,
                capture_layers: Optional[Iterable[str]] = None) -> torch.Tensor:
        wanted = set(capture_layers) if capture_layers is not None else set(ATTENTION_LAYERS)
        temb = self.time_embed(t)

        h0 = self.conv_in(x)
        h1 = self.res_enc16(self.down1(h0), temb)
        h1 = self.attn_enc16(h1, tokens, capture if "enc16" in wanted else None, overrides)
        h2 = self.res_enc8(self.down2(h1), temb)
        h2 = self.attn_enc8(h2, tokens, capture if "enc8" in wanted else None, overrides)
        m = self.res_mid(h2, temb)
        u1 = F.interpolate(m, scale_factor=2, mode="nearest")
        u1 = self.res_dec16(torch.cat([u1, h1], dim=1), temb)
        u1 = self.attn_dec16(u1, tokens, capture if "dec16" in wanted else None, overrides)
        if capture is not None and "dec16" in wanted:
            capture.features["dec16"] = u1[0]
        u2 = F.interpolate(u1, scale_factor=2, mode="nearest")
        u2 = self.res_dec32(torch.cat([u2, h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(u2)))


class ToyBackbone:
    """Conditional denoiser wrapper: prompt encoding, noise prediction, capture."""

    def __init__(self, config: BackboneConfig, model: TinyUNet):
        self.config = config
        self.model = model
        self.model.eval()
        self.schedule = config.schedule()
        self._word_index = {w: i for i, w in enumerate(config.vocab)}

    @classmethod
    def initialize(cls, config: BackboneConfig = BackboneConfig(), seed: int = 0) -> "ToyBackbone":
        torch.manual_seed(seed)
        return cls(config, TinyUNet(config))

    # -- prompts ----------------------------------------------------------

    def encode_prompt(self, prompt: str) -> ConditionEmbedding:
        """Whitespace-tokenized lookup; the object (shape) words are editable."""
        words = tuple(prompt.split())
        if not words:
            raise VocabularyError("empty prompt")
        for w in words:
            if w not in self._word_index:
                raise VocabularyError(f"word {w!r} not in model vocabulary")
        ids = torch.tensor([self._word_index[w] for w in words], dtype=torch.long)
        with torch.no_grad():
            emb = self.token_embedding_table(ids).clone()
        editable = frozenset(i for i, w in enumerate(words) if w in OBJECT_WORDS)
        return ConditionEmbedding(
            token_embeddings=emb,
            token_to_word={i: i for i in range(len(words))},
            editable_slots=editable,
            words=words,
        )

    def null_condition(self) -> ConditionEmbedding:
        with torch.no_grad():
            emb = self.token_embedding_table(torch.tensor([0])).clone()
        return ConditionEmbedding(emb, {0: 0}, frozenset(), ("<null>",))

    @property
    def token_embedding_table(self) -> nn.Embedding:
        return self.model.token_table

    # -- denoising --------------------------------------------------------

    def predict_noise(self, state: LatentState, t: int, cond: ConditionEmbedding,
                      capture=None, overrides: Optional[AttentionOverrides] = None):
        """Predict the forward noise at timestep t; optionally capture attention.

        ``capture`` is False/None for no capture, True for all declared layers,
        or an iterable of layer ids. Returns (noise_prediction, AttentionCapture
        or None). Pure function of its inputs: no RNG, no internal state.
        """
        if not 1 <= t <= self.config.T:
            raise ValueError(f"t={t} outside [1, {self.config.T}]")
        state.validate(self.config)
        if overrides is not None and overrides:
            declared = set(self.config.capture_layers)
            for layer in list(overrides.self_kv) + list(overrides.cross_map):
                if layer not in declared:
                    raise InjectionError(f"injection targets undeclared layer {layer!r}")
        layers = None
        if capture is True:
            layers = set(self.config.capture_layers)
        elif capture:
            layers = set(capture)
            unknown = layers - set(self.config.capture_layers)
            if unknown:
                raise InjectionError(f"capture requests undeclared layers {sorted(unknown)}")
        cap = AttentionCapture() if layers else None
        eps = self.model(
            state.data.unsqueeze(0),
            torch.tensor([t], dtype=torch.long),
            cond.token_embeddings.unsqueeze(0),
            capture=cap, overrides=overrides,
            capture_layers=layers,
        )[0]
        return eps, cap

    def features(self, data: torch.Tensor, t: int, cond: ConditionEmbedding,
                 layer: Optional[str] = None) -> torch.Tensor:
        """Feature map [c, h, w] of one capture layer; differentiable in ``data``."""
        layer = layer or self.config.feature_layer
        if layer not in FEATURE_LAYERS:
            raise InjectionError(f"{layer!r} is not a feature capture layer")
        state = LatentState(data, t)
        _, cap = self.predict_noise(state, t, cond, capture=[layer])
        return cap.features[layer]

    # -- persistence ------------------------------------------------------

    CHECKPOINT_VERSION = 1

    def save(self, path, meta: Optional[dict] = None) -> None:
        torch.save({
            "format_version": self.CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "state_dict": self.model.state_dict(),
            "meta": dict(meta or {}),
        }, path)

    @classmethod
    def load(cls, path) -> "ToyBackbone":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format_version") != cls.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
        config = BackboneConfig.from_dict(blob["config"])
        model = TinyUNet(config)
        model.load_state_dict(blob["state_dict"])
        return cls(config, model)
