"""Supervised next-frame training: baseline pretraining and low-resource fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, InvalidInput, TrainingDiverged
from ..policy import PolicyParams, logprob_and_grad, log_probs
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    lr: float = 3e-3
    max_steps: int = 1500
    batch_size: int = 32
    upsample_factor: float = 5.0
    val_interval: int = 100
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be >= 1")
        if self.lr <= 0 or self.max_steps < 0 or self.batch_size < 1 or self.val_interval < 1:
            raise ConfigError("invalid SFT schedule")


def sft_loss(pp: PolicyParams, examples, drop=None):
    """Mean per-frame negative log-likelihood (summed over channels) and its gradient."""
    if len(examples) == 0:
        raise InvalidInput("empty SFT batch")
    prompts = [e.prompt for e in examples]
    targets = [e.target_audio for e in examples]
    n_frames = sum(len(t) for t in targets)
    w = np.full(len(examples), -1.0 / n_frames)
    lp, grads = logprob_and_grad(pp, prompts, targets, w, drop)
    return -lp.sum() / n_frames, grads


def sft_step(pp: PolicyParams, examples, p_drop: float, rng: np.random.Generator):
    """One loss/gradient evaluation; each example loses its conditioning with prob ``p_drop``."""
    drop = rng.random(len(examples)) < p_drop
    return sft_loss(pp, examples, drop)


def validation_loss(pp: PolicyParams, examples, chunk: int = 64) -> float:
    total, frames = 0.0, 0
    for lo in range(0, len(examples), chunk):
        part = examples[lo:lo + chunk]
        total -= log_probs(pp, [e.prompt for e in part], [e.target_audio for e in part]).sum()
        frames += sum(len(e.target_audio) for e in part)
    return total / frames


def mix_datasets(pretrain, lowres, upsample_factor: float, seed: int):
    """Endless seeded stream mixing two datasets.

    Low-resource examples are drawn with probability
    ``min(1, upsample_factor * natural_share)``.
    """
    if len(pretrain) == 0 or len(lowres) == 0:
        raise InvalidInput("both datasets must be non-empty")
    if upsample_factor < 1:
        raise InvalidInput("upsample_factor must be >= 1")
    share = len(lowres) / (len(lowres) + len(pretrain))
    p_low = min(1.0, upsample_factor * share)
    rng = np.random.default_rng([seed, 0x313])
    while True:
        if rng.random() < p_low:
            yield lowres[rng.integers(len(lowres))]
        else:
            yield pretrain[rng.integers(len(pretrain))]


def uniform_stream(data, seed: int):
    if len(data) == 0:
        raise InvalidInput("empty dataset")
    rng = np.random.default_rng([seed, 0x5F7])
    while True:
        yield data[rng.integers(len(data))]


def select_min(records, key: str):
    """Earliest record with the smallest ``key``."""
    return min(records, key=lambda r: r[key])


def sft_train(pp: PolicyParams, stream, val_set, cfg: SftConfig, seed: int, on_record=None):
    """Adam on the next-frame loss; returns ``(best_params, records)``.

    Validation loss is measured every ``cfg.val_interval`` steps (and at step
    0); the parameters with the lowest validation loss are returned.
    """
    pp = pp.copy()
    opt = Adam(cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([seed, 0x5F7])
    records = []
    best = (np.inf, pp.copy())
    for step in range(cfg.max_steps + 1):
        if step % cfg.val_interval == 0 or step == cfg.max_steps:
            vl = validation_loss(pp, val_set)
            rec = {"step": step, "val_loss": vl}
            records.append(rec)
            if on_record:
                on_record(rec)
            if vl < best[0]:
                best = (vl, pp.copy())
        if step == cfg.max_steps:
            break
        batch = [next(stream) for _ in range(cfg.batch_size)]
        loss, grads = sft_step(pp, batch, pp.config.p_drop, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite SFT loss at step {step}", {"step": step})
        opt.step(pp.tensors, grads)
        if step % cfg.val_interval == 0:
            records[-1]["train_loss"] = float(loss)
    return best[1], records
