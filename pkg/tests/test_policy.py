import numpy as np
import pytest

from codecrl.errors import ConfigError, InvalidInput, LengthExceeded
from codecrl.policy import (ModelConfig, PolicyParams, flatten_grads, guided_logits, init_params,
                            load_checkpoint, log_prob, log_probs, logprob_and_grad,
                            max_response_frames, next_frame_logits, sample_responses,
                            save_checkpoint)
from codecrl.synthworld import Prompt

from conftest import TINY


def test_default_model_size():
    pp = init_params(ModelConfig(), 0)
    assert pp.n_params == 138_848
    assert pp.n_params <= ModelConfig().param_budget


def test_tiny_model_fits_gradient_budget(tiny_params):
    assert tiny_params.n_params <= 5000


@pytest.mark.parametrize("bad", [dict(d_model=10, n_heads=4), dict(param_budget=1000), dict(p_drop=1.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad).validate()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 8, "depth": 3})


def test_init_deterministic():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_params(TINY, 4).flat())


def test_logprob_is_sum_of_next_frame_logprobs(tiny_params, tiny_data):
    prompts, targets = tiny_data
    p, y = prompts[0], targets[0]
    total = 0.0
    for t in range(len(y)):
        logits = next_frame_logits(tiny_params, p, y[:t])
        for c in range(logits.shape[0]):
            row = logits[c]
            total += row[y[t, c]] - (row.max() + np.log(np.exp(row - row.max()).sum()))
    assert log_prob(tiny_params, p, y) == pytest.approx(total, abs=1e-10)


def test_batched_equals_single(tiny_params, tiny_data):
    prompts, targets = tiny_data
    batched = log_probs(tiny_params, prompts, targets)
    single = [log_prob(tiny_params, p, y) for p, y in zip(prompts, targets)]
    assert np.allclose(batched, single, atol=1e-10, rtol=0)


def test_logprob_nonpositive(tiny_params, tiny_data):
    assert (log_probs(tiny_params, *tiny_data) <= 0).all()


def test_gradient_weights_are_linear(tiny_params, tiny_data):
    prompts, targets = tiny_data
    w = np.array([0.3, -1.0, 2.0, 0.5, 0.0])
    _, g = logprob_and_grad(tiny_params, prompts, targets, w)
    parts = [flatten_grads(logprob_and_grad(tiny_params, [p], [y], [1.0])[1]) for p, y in zip(prompts, targets)]
    assert np.allclose(flatten_grads(g), sum(wi * gi for wi, gi in zip(w, parts)), atol=1e-12)


def test_too_long_inputs_rejected(tiny_params):
    with pytest.raises(LengthExceeded):
        log_prob(tiny_params, Prompt(np.arange(7) + 97, np.array([[3, 4]])), np.array([[14, 0]]))


def test_cfg_scale_one_is_conditional():
    rng = np.random.default_rng(0)
    cond, uncond = rng.normal(size=(2, 16)), rng.normal(size=(2, 16))
    assert np.abs(guided_logits(cond, uncond, 1.0) - cond).max() < 1e-12
    assert np.array_equal(guided_logits(cond, uncond, 0.0), uncond)


def test_sampler_logprob_matches_teacher_forcing(tiny_params, tiny_data):
    prompts, _ = tiny_data
    for use_cfg in (False, True):
        out = sample_responses(tiny_params, prompts, 0.7, use_cfg, 2.5, np.random.default_rng(1))
        lp = log_probs(tiny_params, prompts, [o.response for o in out])
        assert np.allclose(lp, [o.logprob_conditional for o in out], atol=1e-9, rtol=0)


def test_sampler_contract(tiny_params, tiny_data):
    prompts, _ = tiny_data
    vocab = TINY.vocab
    a = sample_responses(tiny_params, prompts, 0.7, False, 1.0, np.random.default_rng(5))
    b = sample_responses(tiny_params, prompts, 0.7, False, 1.0, np.random.default_rng(5))
    for p, x, y in zip(prompts, a, b):
        assert np.array_equal(x.response, y.response)
        assert len(x.response) <= max_response_frames(TINY, len(p.text))
        body = x.response[:-1]
        assert not np.isin(body[:, 0], [vocab.bos, vocab.eos]).any()
        if x.response[-1, 0] == vocab.eos:
            assert x.response[-1, 1] == 0


def test_nonpositive_temperature_rejected(tiny_params, tiny_data):
    with pytest.raises(InvalidInput):
        sample_responses(tiny_params, tiny_data[0], 0.0, False, 1.0, np.random.default_rng(0))


def test_greedy_is_deterministic_across_seeds(tiny_params, tiny_data):
    prompts, _ = tiny_data
    a = sample_responses(tiny_params, prompts, 1.0, False, 1.0, np.random.default_rng(0), greedy=True)
    b = sample_responses(tiny_params, prompts, 1.0, False, 1.0, np.random.default_rng(9), greedy=True)
    assert all(np.array_equal(x.response, y.response) for x, y in zip(a, b))


def test_checkpoint_roundtrip(tmp_path, tiny_params):
    path = tmp_path / "ck.npz"
    save_checkpoint(path, tiny_params, "pretrain", extra={"note": "x"})
    pp, meta = load_checkpoint(path)
    assert meta["stage"] == "pretrain" and meta["extra"] == {"note": "x"}
    assert pp.config == tiny_params.config
    assert np.array_equal(pp.flat(), tiny_params.flat())


def test_with_flat_roundtrip(tiny_params):
    v = tiny_params.flat() * 2
    assert np.array_equal(tiny_params.with_flat(v).flat(), v)
    assert isinstance(tiny_params.with_flat(v), PolicyParams)
