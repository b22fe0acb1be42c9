"""Offline preference baseline: best-vs-worst pairs from the base policy, logistic DPO loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InvalidInput, TrainingDiverged
from ..policy import PolicyParams, log_probs, logprob_with_backward, sample_responses
from ..rewards import Anchors, RewardWeights, reward_of
from .optim import Adam


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    delta_min: float = 0.1
    group_size: int = 6
    temperature: float = 0.7
    cfg_probability: float = 0.5
    cfg_scale: float = 2.5
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 16
    weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("preference pairs need group_size >= 2")
        if self.beta <= 0 or self.lr <= 0:
            raise ConfigError("beta and lr must be positive")


@dataclass
class PreferencePair:
    prompt: object
    winner: np.ndarray
    loser: np.ndarray
    reward_gap: float
    ref_logp_winner: float = float("nan")
    ref_logp_loser: float = float("nan")


def pick_pair(rewards, delta_min: float):
    """Indices ``(winner, loser)`` or ``None`` when the gap is below ``delta_min``.

    Ties go to the lowest sample index.
    """
    r = np.asarray(rewards, dtype=np.float64)
    w, l = int(np.argmax(r)), int(np.argmin(r))
    if r[w] - r[l] < delta_min:
        return None
    return w, l


def build_preference_pairs(pp: PolicyParams, prompts, cfg: DpoConfig, oracles, anchors: Anchors,
                           rng: np.random.Generator) -> list:
    k = cfg.group_size
    expanded = [p for p in prompts for _ in range(k)]
    use_cfg = rng.random(len(expanded)) < cfg.cfg_probability
    samples = sample_responses(pp, expanded, cfg.temperature, use_cfg, cfg.cfg_scale, rng)
    pairs = []
    for i, prompt in enumerate(prompts):
        mine = samples[i * k:(i + 1) * k]
        rewards = [reward_of(oracles.score(prompt, s.response), anchors, cfg.weights).total for s in mine]
        picked = pick_pair(rewards, cfg.delta_min)
        if picked is None:
            continue
        w, l = picked
        pairs.append(PreferencePair(prompt, mine[w].response, mine[l].response, rewards[w] - rewards[l]))
    return pairs


def attach_reference(ref: PolicyParams, pairs) -> None:
    """Cache frozen-reference log-likelihoods on each pair."""
    if not pairs:
        return
    prompts = [p.prompt for p in pairs]
    lw = log_probs(ref, prompts, [p.winner for p in pairs])
    ll = log_probs(ref, prompts, [p.loser for p in pairs])
    for p, a, b in zip(pairs, lw, ll):
        p.ref_logp_winner, p.ref_logp_loser = float(a), float(b)


def dpo_loss(pp: PolicyParams, ref: PolicyParams, pairs, beta: float):
    """``-mean log sigmoid(beta * (policy margin - reference margin))`` and its gradient."""
    if not pairs:
        raise InvalidInput("DPO needs at least one pair")
    if any(np.isnan(p.ref_logp_winner) for p in pairs):
        attach_reference(ref, pairs)
    n = len(pairs)
    prompts = [p.prompt for p in pairs] * 2
    responses = [p.winner for p in pairs] + [p.loser for p in pairs]
    lp, backward = logprob_with_backward(pp, prompts, responses)
    ref_w = np.array([p.ref_logp_winner for p in pairs])
    ref_l = np.array([p.ref_logp_loser for p in pairs])
    margin = beta * ((lp[:n] - ref_w) - (lp[n:] - ref_l))
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    # d loss / d margin = -sigmoid(-margin) / n
    dm = -0.5 * (1.0 - np.tanh(0.5 * margin)) / n
    grads = backward(np.concatenate([beta * dm, -beta * dm]))
    return loss, grads


def dpo_train(pp: PolicyParams, ref: PolicyParams, pairs, cfg: DpoConfig, seed: int, on_record=None):
    if not pairs:
        raise InvalidInput("no preference pairs survived the delta_min filter")
    attach_reference(ref, pairs)
    pp = pp.copy()
    opt = Adam(cfg.lr)
    rng = np.random.default_rng([seed, 0xD90])
    records = []
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), min(cfg.batch_size, len(pairs)), replace=False)
        loss, grads = dpo_loss(pp, ref, [pairs[i] for i in idx], cfg.beta)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite DPO loss at step {step}", {"pairs": idx.tolist()})
        opt.step(pp.tensors, grads)
        rec = {"step": step, "loss": loss}
        records.append(rec)
        if on_record:
            on_record(rec)
    return pp, records
