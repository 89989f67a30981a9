"""Masked-reconstruction pretraining loop over a synthetic corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Corpus
from .model import Encoder
from .optim import AdamWState, adamw_step
from .rng import substream

log = logging.getLogger("trace.pretrain")


@dataclass
class LrSchedule:
    peak: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 1 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup steps ({self.warmup_steps}) must be in [1, total {self.total_steps})"
            )


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warmup to the peak, then cosine decay to exactly zero."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.peak * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.3
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class HistoryEntry:
    step: int
    epoch: int
    loss: float
    extras: dict[str, float] = field(default_factory=dict)


def save_history(history: list[HistoryEntry], path: str) -> None:
    """Line-delimited loss history: step, epoch, loss, then any extra columns."""
    extra_keys = sorted({k for h in history for k in h.extras})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# step epoch loss" + ("" if not extra_keys else " " + " ".join(extra_keys)) + "\n")
        for h in history:
            cols = [str(h.step), str(h.epoch), repr(h.loss)]
            cols += [repr(h.extras[k]) for k in extra_keys]
            fh.write(" ".join(cols) + "\n")


def stack_split(corpus: Corpus, split: str) -> np.ndarray:
    """All instances of a split as one (N, C, T) array; shapes must be uniform."""
    instances = corpus.split(split)
    if not instances:
        raise ValueError(f"corpus has no '{split}' instances")
    shapes = {inst.values.shape for inst in instances}
    if len(shapes) != 1:
        raise ValueError(f"non-uniform instance shapes in split '{split}': {shapes}")
    return np.stack([inst.values for inst in instances])


def reconstruction_loss(
    model: Encoder, x: np.ndarray, gamma: float, rng: np.random.Generator, train: bool = True
) -> Tensor:
    """Mean squared error at masked patch positions, in normalized space."""
    output, bitmap = model.encode_batch(x, train=train, rng=rng, mask_gamma=gamma)
    pred = model.reconstruction_head(output)
    layout = output.seq.layout
    x_norm = (x - output.revin.mean) / output.revin.std
    targets = x_norm[:, :, : layout.t_hat * model.cfg.patch_len].reshape(
        x.shape[0], layout.channels, layout.t_hat, model.cfg.patch_len
    )
    token_mask = bitmap[:, layout.all_patch_positions].reshape(
        x.shape[0], layout.channels, layout.t_hat
    )
    element_mask = np.repeat(
        token_mask[..., None].astype(np.float64), model.cfg.patch_len, axis=-1
    )
    return ad.mse(pred, Tensor(targets), element_mask)


def pretrain(
    corpus: Corpus, model: Encoder, config: PretrainConfig
) -> tuple[Encoder, list[HistoryEntry]]:
    """Train the encoder to reconstruct masked patches; returns loss history.

    Deterministic given ``config.seed``: batch order, mask draws, and dropout
    all flow from named substreams of that seed.
    """
    data = stack_split(corpus, "train")
    n = data.shape[0]
    steps_per_epoch = max(1, n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    schedule = LrSchedule(
        peak=config.lr,
        warmup_steps=max(1, int(config.warmup_frac * total_steps)),
        total_steps=total_steps,
    )
    order_rng = substream(config.seed, "pretrain-order")
    train_rng = substream(config.seed, "pretrain-mask")

    state = AdamWState()
    history: list[HistoryEntry] = []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = data[order[b * config.batch_size : (b + 1) * config.batch_size]]
            ad.zero_grad(model.params.values())
            loss = reconstruction_loss(model, batch, config.mask_ratio, train_rng, train=True)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"pretraining diverged: non-finite loss at step {step}")
            ad.backward(loss)
            adamw_step(
                model.params,
                state,
                lr=lr_at(step, schedule),
                weight_decay=config.weight_decay,
            )
            step += 1
            epoch_losses.append(value)
            history.append(HistoryEntry(step=step, epoch=epoch, loss=value))
        log.info("pretrain epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, float(np.mean(epoch_losses)))
    return model, history


def epoch_mean_losses(history: list[HistoryEntry]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for h in history:
        by_epoch.setdefault(h.epoch, []).append(h.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
