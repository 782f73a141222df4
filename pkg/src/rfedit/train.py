"""Training loop for the toy velocity model.

Minimizes the flow-matching objective with t sampled uniformly per example,
standard-normal noise endpoints, and captions as conditioning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from .data import ShapesSample, dataset_hash
from .errors import NonFiniteError
from .model import ModelConfig, ToyMMDiT
from .text import tokenize


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    lr_min_factor: float = 0.05  # cosine decay floor, as a fraction of lr
    seed: int = 0
    log_every: int = 100


def train_toy(model_config: ModelConfig, dataset: list[ShapesSample],
              train_config: TrainConfig = TrainConfig(),
              log=None) -> tuple[ToyMMDiT, list[tuple[int, float]], dict]:
    """Train a model from scratch; returns (model, loss history, manifest).

    The manifest records the seed, step count, and dataset hash for the
    checkpoint container. Loss turning NaN aborts with the offending step.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = train_config
    model = ToyMMDiT.create(model_config, seed=cfg.seed)
    model.train()

    images = torch.stack([s.image for s in dataset])
    ids = torch.stack([tokenize(s.caption, model.vocab, model_config.max_text_tokens).ids
                       for s in dataset])
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.lr_min_factor)

    history: list[tuple[int, float]] = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = torch.randint(len(dataset), (cfg.batch_size,), generator=gen)
        z1 = images[idx]
        z0 = torch.randn(z1.shape, generator=gen)
        t = torch.rand(cfg.batch_size, generator=gen)
        z_t = t.reshape(-1, 1, 1, 1) * z1 + (1.0 - t.reshape(-1, 1, 1, 1)) * z0
        v = model(z_t, t, ids[idx])
        loss = ((z1 - z0 - v) ** 2).mean()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"training diverged (loss NaN) at step {step}", step_index=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, float(loss.item())))
            if log is not None:
                log(f"step {step:5d}  loss {loss.item():.4f}  "
                    f"({time.perf_counter() - start:.0f}s)")
    model.eval()
    manifest = {
        "seed": cfg.seed,
        "training_steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "dataset_hash": dataset_hash(dataset),
        "dataset_size": len(dataset),
    }
    return model, history, manifest


def overfit_single(model_config: ModelConfig, sample: ShapesSample, steps: int = 400,
                   lr: float = 5e-3, seed: int = 0) -> float:
    """Overfit one fixed (noise, image, t) triple; returns the final loss."""
    model = ToyMMDiT.create(model_config, seed=seed)
    model.train()
    gen = torch.Generator().manual_seed(seed)
    z1 = sample.image
    z0 = torch.randn(z1.shape, generator=gen)
    t = 0.5
    ids = tokenize(sample.caption, model.vocab, model_config.max_text_tokens)
    z_t = t * z1 + (1 - t) * z0
    target = z1 - z0
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss = None
    for _ in range(steps):
        v = model(z_t, t, ids)
        loss = ((target - v) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.item())
