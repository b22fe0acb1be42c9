"""
Supervised pretraining, then GRPO on a language the model never saw
====================================================================

A small world and a small model so the whole story runs in a couple of
minutes: pretrain on three languages, estimate reward anchors on a fourth,
and let GRPO pull its CER down using only judge feedback.
"""

import logging
import time

import numpy as np

from codecrl.evalharness import evaluate
from codecrl.policy import ModelConfig, init_params
from codecrl.rewards import estimate_baseline_anchors
from codecrl.synthworld import Oracles, gen_world, make_paired_dataset, make_prompt_set
from codecrl.trainers import GrpoConfig, SftConfig, grpo_train, sft_train
from codecrl.trainers.sft import uniform_stream

logging.getLogger("codecrl").setLevel(logging.ERROR)  # silence judge warnings on empty samples

world = gen_world(seed=3, n_languages=4, n_speakers=4, alphabet_size=8, pool_size=20, n_core=3)
orc = Oracles(world)
cfg = ModelConfig(d_model=32, n_heads=4, n_enc_layers=1, n_dec_layers=1, d_ff=64)

seen, target = [0, 1, 2], [3]
train = [e for l in seen for e in make_paired_dataset(world, l, 300, seed=1, noise=0.1)]
val = [e for l in seen for e in make_paired_dataset(world, l, 16, seed=2, noise=0.1)]

t0 = time.time()
base, log = sft_train(init_params(cfg, 0), uniform_stream(train, 0), val,
                      SftConfig(lr=3e-3, max_steps=600, batch_size=32, val_interval=100), seed=0)
print("pretrained in %.0fs, val loss %.3f" % (time.time() - t0, min(r["val_loss"] for r in log)))

test = make_prompt_set(world, seen + target, 48, seed=9)
before = evaluate(base, test, orc, n_runs=2)
for r in before.rows:
    print("baseline  language", r.language, "CER %.3f" % r.cer_mean)

anchors = estimate_baseline_anchors(base, make_prompt_set(world, target, 48, seed=5), orc)
print(anchors)

# GRPO sees only prompts (text + a context clip) of the target language
gcfg = GrpoConfig(group_size=6, prompts_per_batch=8, lr=0.1, max_iters=120, val_interval=20)
t0 = time.time()
tuned, log = grpo_train(base, gcfg, make_prompt_set(world, target, 200, seed=11), orc, anchors,
                        make_prompt_set(world, target, 32, seed=12), seed=0,
                        on_record=lambda r: "val_cer" in r and print(r))
print("GRPO in %.0fs" % (time.time() - t0))

# GRPO only ever sees target-language prompts, so nothing holds the seen
# languages in place; expect them to drift while the target improves.
after = evaluate(tuned, test, orc, n_runs=2)
for r0, r1 in zip(before.rows, after.rows):
    print("language", r0.language, "CER %.3f -> %.3f" % (r0.cer_mean, r1.cer_mean),
          " SSIM %.3f -> %.3f" % (r0.ssim_mean, r1.ssim_mean))
