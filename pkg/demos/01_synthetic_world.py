"""
A synthetic speech world and its three judges
=============================================

Every language maps letters to its own block of content codes, every
speaker stamps a four-code signature on the second channel, and three
deterministic judges stand in for ASR, speaker verification and a
quality estimator.
"""

import numpy as np

from codecrl.synthworld import (Oracles, Prompt, asr_decode, gen_world, make_paired_dataset,
                                quality_score, synthesize_reference)
from codecrl.tokens import decode_text

world = gen_world(seed=7, n_languages=6, n_speakers=8, alphabet_size=16, pool_size=56, n_core=4)
for lang in world.languages:
    print(lang.language_id, bytes(lang.alphabet).decode())

# a reference utterance: one frame per letter, then EOS
lang, spk = world.language(4), world.speaker(2)
text = np.array(lang.alphabet[:6])
audio = synthesize_reference(world, lang, spk, text)
print(audio)
print("ASR hears:", decode_text(asr_decode(audio, world)))

# Letters shared with a seen language can be "spoken with an accent":
# a code from another language's block still decodes to the same letter.
shared = next(a for a in lang.alphabet if a in world.language(0).alphabet)
accented = synthesize_reference(world, world.language(0), spk, [shared])
print(chr(shared), "via language 0 ->", decode_text(asr_decode(accented, world)))

# judges: CER against the prompt text, SSIM against the context clip, quality
orc = Oracles(world)
ctx = synthesize_reference(world, lang, spk, lang.alphabet[6:10])
prompt = Prompt(text, ctx, 4, 2)
print(orc.score(prompt, audio))

# swap in another speaker's signature and some invalid codes
wrong = audio.copy()
wrong[:-1, 1] = world.speaker(5).signature[0]
wrong[1, 0] = 253
print(orc.score(prompt, wrong), quality_score(wrong, world))

# recorded corpora can carry mispronunciations (content-code swaps)
noisy = make_paired_dataset(world, 4, 3, seed=0, noise=0.2)
for ex in noisy:
    print(decode_text(ex.text), "->", decode_text(asr_decode(ex.target_audio, world)))
