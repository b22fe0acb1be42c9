import sys
import numpy as np
import pytest

from codecrl.policy import ModelConfig, init_params
from codecrl.synthworld import Prompt, gen_world, make_paired_dataset
from codecrl.tokens import AudioVocab

TINY = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=8, audio_vocab=16,
                   max_text_len=6, max_context_len=6, max_frames=10)


@pytest.fixture(scope="session")
def tiny_world():
    return gen_world(0, 2, 2, 3, vocab=AudioVocab(16))


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY, 0)


@pytest.fixture(scope="session")
def tiny_data(tiny_world):
    """Three short (prompt, target) pairs that fit the tiny model."""
    ex = make_paired_dataset(tiny_world, 0, 3, 0) + make_paired_dataset(tiny_world, 1, 2, 0)
    prompts = [Prompt(e.text[:6], e.context_audio[:6], e.language_id) for e in ex]
    targets = [np.vstack([e.target_audio[:4], e.target_audio[-1:]]) for e in ex]
    return prompts, targets


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
