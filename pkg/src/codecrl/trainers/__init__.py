from .dpo import DpoConfig, PreferencePair, build_preference_pairs, dpo_loss, dpo_train
from .grpo import (GrpoConfig, RolloutGroup, group_advantages, grpo_loss, grpo_train,
                   rollout_group, rollout_groups)
from .optim import SGD, Adam
from .sft import SftConfig, mix_datasets, select_min, sft_loss, sft_step, sft_train

__all__ = [
    "Adam", "DpoConfig", "GrpoConfig", "PreferencePair", "RolloutGroup", "SGD", "SftConfig",
    "build_preference_pairs", "dpo_loss", "dpo_train", "group_advantages", "grpo_loss",
    "grpo_train", "mix_datasets", "rollout_group", "rollout_groups", "select_min", "sft_loss",
    "sft_step", "sft_train",
]
