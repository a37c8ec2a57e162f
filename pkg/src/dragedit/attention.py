"""Prompt alignment and the two text-editing attention control modes.

Cross-attention control swaps aligned tokens' post-softmax attention maps in
the editing branch for the reconstruction branch's stored maps during an early
fraction of sampling. Mutual self-attention control makes the editing branch's
self-attention query the reconstruction branch's keys/values past a start
step. Both are expressed as AttentionOverrides consumed by the denoiser.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import torch

from .backbone import AttentionCapture, AttentionOverrides
from .errors import InjectionError
# the mask ops live with the masks; re-exported here because they gate and
# feed the attention machinery
from .masks import downsample_mask, make_gate_mask  # noqa: F401


@dataclass(frozen=True)
class TokenAlignment:
    """LCS word alignment between a source and a target prompt."""
    pairs: Tuple[Tuple[int, int], ...]   # (source slot, target slot)
    source_words: Tuple[str, ...]
    target_words: Tuple[str, ...]

    @property
    def new_target_slots(self) -> Tuple[int, ...]:
        aligned = {j for _, j in self.pairs}
        return tuple(j for j in range(len(self.target_words)) if j not in aligned)

    def target_to_source(self) -> Dict[int, int]:
        return {j: i for i, j in self.pairs}


def align_prompts(p_source: str, p_target: str) -> TokenAlignment:
    """Longest-common-subsequence alignment over whitespace-split words.

    Deterministic: on DP ties the backtrack prefers consuming a source word.
    Target words outside the LCS are "new" and keep their own attention maps.
    """
    a, b = p_source.split(), p_target.split()
    if not a or not b:
        raise ValueError("prompts must be non-empty")
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            dp[i][j] = (dp[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1]
                        else max(dp[i - 1][j], dp[i][j - 1]))
    pairs = []
    i, j = m, n
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1] and dp[i][j] == dp[i - 1][j - 1] + 1:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif dp[i - 1][j] >= dp[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return TokenAlignment(tuple(reversed(pairs)), tuple(a), tuple(b))


@dataclass
class AttentionStore:
    """Branch-1 attention captures by timestep, sealed before branch 2 reads."""
    alignment: TokenAlignment
    captures: Dict[int, AttentionCapture] = field(default_factory=dict)
    sealed: bool = False

    def put(self, t: int, capture: AttentionCapture) -> None:
        if self.sealed:
            raise InjectionError("attention store is sealed")
        if t in self.captures:
            raise InjectionError(f"attention capture already stored at t={t}")
        self.captures[t] = capture.detached()

    def get(self, t: int) -> AttentionCapture:
        if t not in self.captures:
            raise InjectionError(f"no attention capture stored at t={t}")
        return self.captures[t]

    def seal(self) -> None:
        self.sealed = True


def cross_attention_active(t: int, t_start: int, tau_cross: float) -> bool:
    """Swap during the first tau_cross fraction of the sampling run."""
    if tau_cross <= 0 or t_start <= 0:
        return False
    elapsed = t_start - t
    return elapsed < tau_cross * t_start


def cross_attention_control(store: AttentionStore, t: int, t_start: int,
                            tau_cross: float, layers: Iterable[str]
                            ) -> AttentionOverrides:
    """Overrides replacing aligned tokens' maps with the stored branch-1 maps.

    Rows (positions) are renormalized to sum to one after the swap. Returns
    empty overrides outside the active window.
    """
    if not cross_attention_active(t, t_start, tau_cross):
        return AttentionOverrides()
    capture = store.get(t)
    mapping = store.alignment.target_to_source()
    overrides = AttentionOverrides()
    for layer in layers:
        stored = {}
        for (layer_id, token), m in capture.cross_maps.items():
            if layer_id == layer:
                stored[token] = m.reshape(-1)
        if not stored:
            raise InjectionError(f"branch-1 capture at t={t} is missing layer {layer!r}")

        def swap(probs: torch.Tensor, stored=stored, mapping=mapping) -> torch.Tensor:
            out = probs.clone()
            for j in range(probs.shape[1]):
                i = mapping.get(j)
                if i is not None and i in stored:
                    out[:, j] = stored[i]
            return out / out.sum(dim=1, keepdim=True)

        overrides.cross_map[layer] = swap
    return overrides


def mutual_self_attention_active(t: int, t_start: int, start_step: int) -> bool:
    """Inject K/V once at least start_step sampling steps have elapsed."""
    return (t_start - t) >= start_step


def mutual_self_attention_control(store: AttentionStore, t: int, t_start: int,
                                  start_step: int, layers: Iterable[str]
                                  ) -> AttentionOverrides:
    """Overrides making self-attention use branch-1 keys/values (queries stay)."""
    if not mutual_self_attention_active(t, t_start, start_step):
        return AttentionOverrides()
    capture = store.get(t)
    overrides = AttentionOverrides()
    for layer in layers:
        if layer not in capture.self_kv:
            raise InjectionError(f"branch-1 capture at t={t} is missing K/V for {layer!r}")
        overrides.self_kv[layer] = capture.self_kv[layer]
    return overrides
