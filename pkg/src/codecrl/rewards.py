"""Reward shaping: anchor-based normalisation of judge scores and their weighted sum."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InvalidInput
from .synthworld import RawScores

log = logging.getLogger(__name__)

PESQ_MAX = 4.5


@dataclass(frozen=True)
class RewardWeights:
    w_cer: float = 0.45
    w_ssim: float = 0.45
    w_pesq: float = 0.1

    def __post_init__(self):
        if min(self.w_cer, self.w_ssim, self.w_pesq) < 0:
            raise ConfigError("reward weights must be nonnegative")
        total = self.w_cer + self.w_ssim + self.w_pesq
        if abs(total - 1.0) > 1e-12:
            log.warning("reward weights sum to %.6g, not 1", total)


@dataclass(frozen=True)
class AnchorSpec:
    """Three-point map: ``worst -> 0``, ``baseline_mean -> 0.5``, ``best -> 1``.

    Orientation follows from the anchors: when ``best < worst`` lower raw
    scores are better.
    """

    worst: float
    baseline_mean: float
    best: float

    def __post_init__(self):
        if self.worst == self.best:
            raise ConfigError(f"degenerate anchors: worst == best == {self.worst}")
        lo, hi = sorted((self.worst, self.best))
        if not lo <= self.baseline_mean <= hi:
            raise ConfigError(f"baseline mean {self.baseline_mean} outside [{lo}, {hi}]")

    @property
    def lower_is_better(self) -> bool:
        return self.best < self.worst

    @property
    def degenerate(self) -> bool:
        return self.baseline_mean in (self.worst, self.best)


def normalize_piecewise(raw, spec: AnchorSpec):
    """Map raw scores to [0, 1] by linear interpolation between the anchors.

    If the baseline mean coincides with an end anchor the middle point is
    dropped and a single line from worst to best is used.
    """
    raw = np.asarray(raw, dtype=np.float64)
    # distance travelled from worst towards best, in raw units
    span = abs(spec.best - spec.worst)
    sign = -1.0 if spec.lower_is_better else 1.0
    t = np.clip(sign * (raw - spec.worst), 0.0, span)
    if spec.degenerate:
        out = t / span
    else:
        mid = sign * (spec.baseline_mean - spec.worst)
        out = np.where(t <= mid, 0.5 * t / mid, 0.5 + 0.5 * (t - mid) / (span - mid))
    return float(out) if out.ndim == 0 else out


def normalize_pesq(raw):
    out = np.clip(np.asarray(raw, dtype=np.float64), 0.0, PESQ_MAX) / PESQ_MAX
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NormalizedRewards:
    r_cer: float
    r_ssim: float
    r_pesq: float
    total: float


def aggregate(r_cer: float, r_ssim: float, r_pesq: float, weights: RewardWeights = RewardWeights()) -> float:
    for name, r in (("r_cer", r_cer), ("r_ssim", r_ssim), ("r_pesq", r_pesq)):
        if not 0.0 <= r <= 1.0:
            raise InvalidInput(f"{name}={r} outside [0, 1]")
    return weights.w_cer * r_cer + weights.w_ssim * r_ssim + weights.w_pesq * r_pesq


CER_WORST, CER_BEST = 1.0, 0.0
SSIM_WORST, SSIM_BEST = 0.0, 1.0


@dataclass(frozen=True)
class Anchors:
    cer: AnchorSpec
    ssim: AnchorSpec

    def to_json(self) -> str:
        return json.dumps({"format_version": 1, "cer": asdict(self.cer), "ssim": asdict(self.ssim)},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Anchors":
        doc = json.loads(text)
        return cls(AnchorSpec(**doc["cer"]), AnchorSpec(**doc["ssim"]))

    @classmethod
    def from_means(cls, mean_cer: float, mean_ssim: float) -> "Anchors":
        return cls(
            AnchorSpec(CER_WORST, float(np.clip(mean_cer, 0, 1)), CER_BEST),
            AnchorSpec(SSIM_WORST, float(np.clip(mean_ssim, 0, 1)), SSIM_BEST),
        )


def reward_of(scores: RawScores, anchors: Anchors, weights: RewardWeights = RewardWeights()) -> NormalizedRewards:
    r_cer = normalize_piecewise(min(scores.cer, 1.0), anchors.cer)
    r_ssim = normalize_piecewise(scores.ssim, anchors.ssim)
    r_pesq = normalize_pesq(scores.pesq)
    return NormalizedRewards(r_cer, r_ssim, r_pesq, aggregate(r_cer, r_ssim, r_pesq, weights))


def anchors_from_scores(cer_values, ssim_values) -> Anchors:
    """Baseline anchors from raw judge scores (CER clipped at 1 before averaging)."""
    cer_values = np.minimum(np.asarray(cer_values, dtype=np.float64), 1.0)
    ssim_values = np.asarray(ssim_values, dtype=np.float64)
    if cer_values.size == 0:
        raise InvalidInput("no scores to estimate anchors from")
    anchors = Anchors.from_means(cer_values.mean(), ssim_values.mean())
    for name, spec in (("cer", anchors.cer), ("ssim", anchors.ssim)):
        if spec.degenerate:
            log.warning("%s baseline mean %.4g hits an end anchor; using a single segment", name,
                        spec.baseline_mean)
    return anchors


def estimate_baseline_anchors(pp, prompts, oracles, n_samples: int = 1, temperature: float = 0.7,
                              seed: int = 0, batch_size: int = 64) -> Anchors:
    """Sample ``n_samples`` responses per prompt from the baseline and average their scores."""
    from .policy import sample_responses

    if len(prompts) == 0:
        raise InvalidInput("empty prompt set")
    if n_samples < 1:
        raise InvalidInput("n_samples must be >= 1")
    rng = np.random.default_rng([seed, 0xA2C])
    expanded = [p for p in prompts for _ in range(n_samples)]
    cers, ssims = [], []
    for lo in range(0, len(expanded), batch_size):
        chunk = expanded[lo:lo + batch_size]
        for p, s in zip(chunk, sample_responses(pp, chunk, temperature, False, 1.0, rng)):
            raw = oracles.score(p, s.response)
            cers.append(raw.cer)
            ssims.append(raw.ssim)
    return anchors_from_scores(cers, ssims)
