"""
From judge scores to group-relative advantages
==============================================

Raw CER and speaker similarity are mapped through three-point anchors (worst
to 0, baseline mean to 0.5, best to 1), combined with fixed weights, and then
centred within each group of responses to the same prompt.
"""

import numpy as np

from codecrl.rewards import Anchors, normalize_pesq, normalize_piecewise, reward_of
from codecrl.synthworld import RawScores
from codecrl.trainers import group_advantages

anchors = Anchors.from_means(mean_cer=0.3, mean_ssim=0.62)
cer = np.linspace(0, 1, 11)
print(np.round(normalize_piecewise(cer, anchors.cer), 3))
print(np.round(normalize_piecewise(np.linspace(0, 1, 11), anchors.ssim), 3))
print(normalize_pesq([-0.5, 0.0, 2.25, 4.5, 5.0]))

# one prompt, six sampled responses
scores = [RawScores(0.0, 0.9, 4.5), RawScores(0.1, 0.7, 4.5), RawScores(0.3, 0.62, 4.0),
          RawScores(0.5, 0.6, 3.0), RawScores(1.0, 0.2, 1.0), RawScores(2.5, 0.4, -0.5)]
rewards = np.array([reward_of(s, anchors).total for s in scores])
mean, adv = group_advantages(rewards)
print("rewards   ", np.round(rewards, 3))
print("advantages", np.round(adv, 3), "sum", adv.sum())

# shifting every reward of the group leaves the advantages alone
print(np.allclose(group_advantages(rewards + 3.0)[1], adv))
