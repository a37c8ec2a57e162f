"""Linear-in-variance diffusion noise schedule and the reverse-step statistics.

Timesteps are indexed t = 0..T with t = 0 the clean-data boundary
(alpha_bar[0] == 1). The sampler's per-step std comes in two flavours:

* ``"large"`` (default): sigma_t = sqrt(beta_t), strictly positive at every
  step, which is what makes the stored-noise replay of the inversion exact
  at every step including t = 1.
* ``"posterior"``: sigma_t = sqrt(beta_tilde_t), the DDPM posterior std,
  which collapses to 0 at t = 1 and turns the final step deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor      # [T+1], betas[0] = 0 placeholder
    alphas: torch.Tensor     # [T+1], alphas[0] = 1
    alpha_bar: torch.Tensor  # [T+1], alpha_bar[0] = 1, strictly decreasing
    sigma_mode: str = "large"

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 0.2,
               sigma_mode: str = "large") -> "NoiseSchedule":
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        if sigma_mode not in ("large", "posterior"):
            raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
        betas = torch.zeros(T + 1, dtype=torch.float64)
        betas[1:] = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alphas = 1.0 - betas
        alpha_bar = torch.cumprod(alphas, dim=0)
        return cls(betas=betas, alphas=alphas, alpha_bar=alpha_bar, sigma_mode=sigma_mode)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def validate(self) -> None:
        ab = self.alpha_bar
        if not torch.isclose(ab[0], torch.tensor(1.0, dtype=ab.dtype)):
            raise ValueError("alpha_bar[0] must be 1")
        if not (0.0 < float(ab[-1]) < float(ab[1]) < 1.0):
            raise ValueError("need 0 < alpha_bar[T] < alpha_bar[1] < 1")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ValueError("alpha_bar must be strictly decreasing")

    def q_sample(self, x0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        """Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
        ab = float(self.alpha_bar[t])
        return (ab ** 0.5) * x0 + ((1.0 - ab) ** 0.5) * noise

    def posterior_mean(self, x_t: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        """mu_t(x_t) = (x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, T], got {t}")
        beta = float(self.betas[t])
        ab = float(self.alpha_bar[t])
        alpha = float(self.alphas[t])
        return (x_t - beta / ((1.0 - ab) ** 0.5) * eps) / (alpha ** 0.5)

    def sigma(self, t: int) -> float:
        """Reverse-step std at t, depending on sigma_mode."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, T], got {t}")
        beta = float(self.betas[t])
        if self.sigma_mode == "large":
            return beta ** 0.5
        ab_prev = float(self.alpha_bar[t - 1])
        ab = float(self.alpha_bar[t])
        return ((1.0 - ab_prev) / (1.0 - ab) * beta) ** 0.5

    def signature(self) -> dict:
        """Stable identity for checking two trajectories share a schedule."""
        return {
            "T": self.T,
            "beta_start": round(float(self.betas[1]), 12),
            "beta_end": round(float(self.betas[-1]), 12),
            "sigma_mode": self.sigma_mode,
        }
