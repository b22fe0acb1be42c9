"""
Classifier-free guidance on discrete frames
===========================================

The same network scores frames with and without its conditioning; guidance
extrapolates from the unconditional logits towards the conditional ones.
Scale 1 is plain conditional sampling.
"""

import numpy as np

from codecrl.policy import ModelConfig, guided_logits, init_params, next_frame_logits, sample_responses
from codecrl.synthworld import gen_world, make_prompt_set
from codecrl.tokens import CONTENT

world = gen_world(seed=7, n_languages=2, n_speakers=2, alphabet_size=8)
pp = init_params(ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32), seed=0)
prompt = make_prompt_set(world, [0], 1, seed=0)[0]

cond = next_frame_logits(pp, prompt)
uncond = next_frame_logits(pp, prompt, drop_text=True, drop_context=True)
for s in (0.0, 1.0, 2.5):
    g = guided_logits(cond, uncond, s)
    p = np.exp(g[CONTENT] - g[CONTENT].max())
    p /= p.sum()
    print("scale", s, "top content codes", np.argsort(p)[::-1][:4], "entropy %.2f" % -(p * np.log(p + 1e-300)).sum())

print(np.abs(guided_logits(cond, uncond, 1.0) - cond).max())

# sampling with guidance still records the conditional log-likelihood
rng = np.random.default_rng(0)
for out in sample_responses(pp, [prompt] * 3, 0.7, [False, True, True], 2.5, rng):
    print(len(out.response), out.sampled_with_cfg, round(out.logprob_conditional, 2))
