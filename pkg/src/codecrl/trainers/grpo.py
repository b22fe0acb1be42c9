"""Online group-relative policy optimisation with automatic judge rewards.

For every prompt the current policy samples a group of K responses; each
response's advantage is its reward minus the group mean, and the policy is
moved along the advantage-weighted log-likelihood gradient. There is no KL
penalty, no importance ratio and no clipping: one update per rollout batch,
so the sampling policy and the differentiated policy coincide.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import ConfigError, TrainingDiverged
from ..policy import PolicyParams, logprob_and_grad, sample_responses
from ..rewards import Anchors, NormalizedRewards, RewardWeights, normalize_piecewise, reward_of
from ..synthworld import RawScores
from .optim import SGD

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 6
    prompts_per_batch: int = 8
    temperature: float = 0.7
    cfg_probability: float = 0.5
    cfg_scale: float = 2.5
    lr: float = 1e-3
    max_iters: int = 300
    val_interval: int = 50
    selection: str = "r_cer"  # or "cer" (raw, lower is better)
    weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.group_size < 1 or self.prompts_per_batch < 1:
            raise ConfigError("group_size and prompts_per_batch must be >= 1")
        if self.temperature <= 0 or self.lr <= 0 or self.cfg_scale <= 0:
            raise ConfigError("temperature, lr and cfg_scale must be positive")
        if not 0 <= self.cfg_probability <= 1:
            raise ConfigError("cfg_probability must lie in [0, 1]")
        if self.selection not in ("r_cer", "cer"):
            raise ConfigError(f"unknown selection metric {self.selection!r}")
        if self.val_interval < 1 or self.max_iters < 0:
            raise ConfigError("invalid GRPO schedule")

    @classmethod
    def profile(cls, name: str, **overrides) -> "GrpoConfig":
        if name == "paper":
            base = cls(group_size=12, prompts_per_batch=64, lr=2e-7, max_iters=2000)
        elif name == "desk":
            base = cls()
        else:
            raise ConfigError(f"unknown profile {name!r}")
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutGroup:
    prompt_index: int
    prompt: object
    responses: list
    raw_scores: list
    components: list
    rewards: np.ndarray
    group_mean: float
    advantages: np.ndarray


def group_advantages(rewards):
    """Group mean and centred advantages ``r_k - mean(r)``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 1:
        log.warning("group of size 1: advantage is identically zero")
    # summing k equal values and dividing by k can land one ulp away from the
    # value itself; a constant group must carry exactly zero advantage
    mu = r[0] if r.size and np.all(r == r[0]) else r.mean()
    return float(mu), r - mu


def _score(oracles, anchors, weights, prompt, response):
    try:
        raw = oracles.score(prompt, response)
        return raw, reward_of(raw, anchors, weights)
    except Exception:  # a crashing judge gives zero reward, group size stays K
        log.exception("judge failed on a response; assigning reward 0")
        return None, NormalizedRewards(0.0, 0.0, 0.0, 0.0)


def rollout_groups(pp: PolicyParams, prompts, indices, cfg: GrpoConfig, oracles, anchors: Anchors,
                   rng: np.random.Generator) -> list:
    """Sample and score K responses for each prompt in one batched decode."""
    k = cfg.group_size
    expanded = [p for p in prompts for _ in range(k)]
    use_cfg = rng.random(len(expanded)) < cfg.cfg_probability
    samples = sample_responses(pp, expanded, cfg.temperature, use_cfg, cfg.cfg_scale, rng)
    groups = []
    for g, (idx, prompt) in enumerate(zip(indices, prompts)):
        mine = samples[g * k:(g + 1) * k]
        scored = [_score(oracles, anchors, cfg.weights, prompt, s.response) for s in mine]
        rewards = np.array([n.total for _, n in scored])
        mu, adv = group_advantages(rewards)
        groups.append(RolloutGroup(idx, prompt, mine, [r for r, _ in scored], [n for _, n in scored],
                                   rewards, mu, adv))
    return groups


def rollout_group(pp: PolicyParams, prompt, cfg: GrpoConfig, oracles, anchors: Anchors,
                  rng: np.random.Generator, index: int = 0) -> RolloutGroup:
    return rollout_groups(pp, [prompt], [index], cfg, oracles, anchors, rng)[0]


def grpo_loss(pp: PolicyParams, groups):
    """``-(1/(M K)) sum_i sum_k A_ik log pi(y_ik | x_i)`` and its exact gradient."""
    prompts, responses, adv = [], [], []
    for g in groups:
        for s, a in zip(g.responses, g.advantages):
            prompts.append(g.prompt)
            responses.append(s.response)
            adv.append(a)
    adv = np.asarray(adv)
    n = len(adv)
    lp, grads = logprob_and_grad(pp, prompts, responses, -adv / n)
    return float(-(adv @ lp) / n), grads


def validate(pp: PolicyParams, val_prompts, oracles, anchors: Anchors, cfg: GrpoConfig, seed: int,
             batch_size: int = 64) -> dict:
    """Mean normalised and raw CER of one sample per validation prompt (no CFG).

    Uses the same random stream on every call so checkpoints are compared on
    common random numbers.
    """
    rng = np.random.default_rng([seed, 0x7A1])
    cers, ssims = [], []
    for lo in range(0, len(val_prompts), batch_size):
        chunk = val_prompts[lo:lo + batch_size]
        for p, s in zip(chunk, sample_responses(pp, chunk, cfg.temperature, False, 1.0, rng)):
            raw = oracles.score(p, s.response)
            cers.append(raw.cer)
            ssims.append(raw.ssim)
    cers = np.asarray(cers)
    return {
        "val_r_cer": float(np.mean(normalize_piecewise(cers, anchors.cer))),
        "val_cer": float(cers.mean()),
        "val_ssim": float(np.mean(ssims)),
    }


def select_best(records, selection: str = "r_cer"):
    """Earliest validation record with the best selection metric."""
    vals = [r for r in records if "val_r_cer" in r]
    if selection == "r_cer":
        return max(vals, key=lambda r: r["val_r_cer"])
    return min(vals, key=lambda r: r["val_cer"])


def grpo_train(pp: PolicyParams, cfg: GrpoConfig, prompts, oracles, anchors: Anchors, val_prompts,
               seed: int, on_record=None):
    """Run GRPO from ``pp``; returns ``(best_params, records)``.

    Every ``cfg.val_interval`` iterations (including iteration 0) the policy
    is validated and the checkpoint with the best validation CER reward is
    kept.
    """
    pp = pp.copy()
    opt = SGD(cfg.lr)
    rng = np.random.default_rng([seed, 0x6290])
    records = []
    best_key, best_pp = None, None
    m = min(cfg.prompts_per_batch, len(prompts))
    for it in range(cfg.max_iters + 1):
        if it % cfg.val_interval == 0 or it == cfg.max_iters:
            rec = {"iter": it, **validate(pp, val_prompts, oracles, anchors, cfg, seed)}
            records.append(rec)
            if on_record:
                on_record(rec)
            key = rec["val_r_cer"] if cfg.selection == "r_cer" else -rec["val_cer"]
            if best_key is None or key > best_key:
                best_key, best_pp = key, pp.copy()
        if it == cfg.max_iters:
            break
        idx = rng.choice(len(prompts), m, replace=False)
        groups = rollout_groups(pp, [prompts[i] for i in idx], idx, cfg, oracles, anchors, rng)
        loss, grads = grpo_loss(pp, groups)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            bad = [{"prompt_index": int(g.prompt_index), "rewards": g.rewards.tolist(),
                    "logprobs": [s.logprob_conditional for s in g.responses]} for g in groups]
            raise TrainingDiverged(f"non-finite GRPO loss at iteration {it}", bad)
        opt.step(pp.tensors, grads)
        comps = [c for g in groups for c in g.components]
        rec = {
            "iter": it,
            "loss": loss,
            "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
            "r_cer": float(np.mean([c.r_cer for c in comps])),
            "r_ssim": float(np.mean([c.r_ssim for c in comps])),
            "r_pesq": float(np.mean([c.r_pesq for c in comps])),
        }
        records.append(rec)
        if on_record:
            on_record(rec)
    return best_pp, records
