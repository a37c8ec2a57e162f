"""Noise-prediction training for the toy model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .backbone import BackboneConfig, TinyUNet, ToyBackbone
from .toydata import scene_stream


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-5
    cond_dropout: float = 0.1
    seed: int = 0
    loss_drop_target: float = 0.25  # smoothed final/initial loss ratio to report against
    log_every: int = 200


@dataclass
class TrainReport:
    steps: int
    initial_loss: float     # smoothed over the first window
    final_loss: float       # smoothed over the last window
    loss_ratio: float
    wall_seconds: float
    history: list = field(default_factory=list)  # (step, smoothed_loss)


def train_toy(config: BackboneConfig = BackboneConfig(),
              train: TrainConfig = TrainConfig(),
              progress: Optional[Callable[[int, float], None]] = None
              ) -> tuple[ToyBackbone, TrainReport]:
    """Train the toy denoiser with the standard noise-prediction MSE objective.

    Conditioning is dropped to the null token for a fraction of samples so the
    model supports classifier-free guidance. Fully deterministic for a fixed
    (config, train) pair on a fixed torch build.
    """
    torch.manual_seed(train.seed)
    model = TinyUNet(config)
    model.train()
    schedule = config.schedule()
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)

    # pre-encode conditioning directly from the embedding table being trained
    word_index = {w: i for i, w in enumerate(config.vocab)}
    stream = scene_stream(train.seed + 1, config.resolution)
    gen = torch.Generator().manual_seed(train.seed + 2)

    window = max(1, train.steps // 20)
    losses: list[float] = []
    history: list[tuple[int, float]] = []
    t0 = time.monotonic()
    for step in range(train.steps):
        imgs, token_ids = [], []
        max_len = 0
        for _ in range(train.batch_size):
            img, caption, _ = next(stream)
            imgs.append(img)
            if torch.rand((), generator=gen).item() < train.cond_dropout:
                ids = [0]
            else:
                ids = [word_index[w] for w in caption.split()]
            token_ids.append(ids)
            max_len = max(max_len, len(ids))
        # pad with the null token; the toy captions are all length 4 or 1
        padded = torch.zeros(train.batch_size, max_len, dtype=torch.long)
        for i, ids in enumerate(token_ids):
            padded[i, :len(ids)] = torch.tensor(ids)
        x0 = torch.stack(imgs)
        t = torch.randint(1, config.T + 1, (train.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        ab = schedule.alpha_bar[t].float().view(-1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise

        tokens = model.token_table(padded)
        pred = model(x_t, t, tokens)
        loss = torch.nn.functional.mse_loss(pred, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()

        losses.append(loss.item())
        if (step + 1) % train.log_every == 0 or step + 1 == train.steps:
            smoothed = sum(losses[-window:]) / len(losses[-window:])
            history.append((step + 1, smoothed))
            if progress is not None:
                progress(step + 1, smoothed)

    initial = sum(losses[:window]) / window
    final = sum(losses[-window:]) / len(losses[-window:])
    report = TrainReport(
        steps=train.steps, initial_loss=initial, final_loss=final,
        loss_ratio=final / initial, wall_seconds=time.monotonic() - t0,
        history=history,
    )
    model.eval()
    return ToyBackbone(config, model), report
