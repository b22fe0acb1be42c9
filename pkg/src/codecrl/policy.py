"""Autoregressive encoder-decoder policy over audio frames.

A bidirectional transformer encodes the text; a causal transformer decoder
reads the speaker's context clip as a prefix, then a BOS frame, then the
frames generated so far, and cross-attends to the text encoding. Each
decoder position predicts all channels of the next frame at once through
per-channel heads whose output matrices are tied to the frame embeddings.

Either conditioning input can be replaced by a learned null vector, which is
what makes classifier-free guidance possible at sampling time.

Gradients are derived by hand and checked against finite differences in
the test-suite.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, InvalidInput, LengthExceeded
from .synthworld import Prompt
from .tokens import CONTENT, SPEAKER, TEXT_VOCAB, AudioVocab

# token kinds used to build embeddings
_PAD, _TOK, _EOT, _NULL = 0, 1, 2, 3
_CTX, _GEN = 4, 5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 48
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 96
    audio_vocab: int = 256
    channels: int = 2
    max_text_len: int = 16
    max_context_len: int = 16
    max_frames: int = 40
    p_drop: float = 0.1
    param_budget: int = 1_000_000

    def validate(self) -> "ModelConfig":
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.n_enc_layers, self.n_dec_layers, self.d_ff) < 1:
            raise ConfigError("need at least one encoder and decoder layer and d_ff >= 1")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop={self.p_drop} outside [0, 1)")
        if self.channels != 2:
            raise ConfigError("exactly two channels (content, speaker) are supported")
        if min(self.max_text_len, self.max_context_len, self.max_frames) < 1:
            raise ConfigError("length limits must be positive")
        AudioVocab(self.audio_vocab, self.channels)
        count = sum(int(np.prod(s)) for s in param_shapes(self).values())
        if count > self.param_budget:
            raise ConfigError(f"model has {count} parameters, budget is {self.param_budget}")
        return self

    @property
    def vocab(self) -> AudioVocab:
        return AudioVocab(self.audio_vocab, self.channels)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def max_response_frames(cfg: ModelConfig, text_len: int) -> int:
    return min(2 * text_len + 8, cfg.max_frames)


@dataclass
class PolicyParams:
    config: ModelConfig
    tensors: dict = field(repr=False)

    def __getitem__(self, key):
        return self.tensors[key]

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])

    def with_flat(self, vec) -> "PolicyParams":
        out, i = {}, 0
        for k in sorted(self.tensors):
            v = self.tensors[k]
            out[k] = np.asarray(vec[i:i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size
        return PolicyParams(self.config, out)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in sorted(grads)])


def _layer_shapes(cfg: ModelConfig, prefix: str, attn_names) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {}
    for i, name in enumerate(attn_names, 1):
        shapes[f"{prefix}.ln{i}.g"] = (d,)
        shapes[f"{prefix}.ln{i}.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{name}.{w}"] = (d, d)
    n = len(attn_names) + 1
    shapes[f"{prefix}.ln{n}.g"] = (d,)
    shapes[f"{prefix}.ln{n}.b"] = (d,)
    shapes[f"{prefix}.ff.w1"] = (d, f)
    shapes[f"{prefix}.ff.b1"] = (f,)
    shapes[f"{prefix}.ff.w2"] = (f, d)
    shapes[f"{prefix}.ff.b2"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict:
    d, v, c = cfg.d_model, cfg.audio_vocab, cfg.channels
    shapes = {
        "text_emb": (TEXT_VOCAB, d),
        "enc_pos": (cfg.max_text_len + 1, d),
        "eot": (d,),
        "null_text": (d,),
        "audio_emb": (c, v, d),
        "dec_pos": (max(cfg.max_context_len, cfg.max_frames), d),
        "seg": (2, d),
        "null_ctx": (d,),
        "enc_lnf.g": (d,),
        "enc_lnf.b": (d,),
        "dec_lnf.g": (d,),
        "dec_lnf.b": (d,),
        "head_proj": (c, d, d),
        "head_bias": (c, v),
    }
    for i in range(cfg.n_enc_layers):
        shapes.update(_layer_shapes(cfg, f"enc.{i}", ["attn"]))
    for i in range(cfg.n_dec_layers):
        shapes.update(_layer_shapes(cfg, f"dec.{i}", ["self", "cross"]))
    return shapes


HEAD_INIT_GAIN = 0.1


def init_params(config: ModelConfig, seed: int) -> PolicyParams:
    """Zero-mean normal weights with std 1/sqrt(d_model); unit LN gains, zero biases.

    The output projections start ten times smaller so that an untrained
    model predicts close to uniform frames.
    """
    config.validate()
    shapes = param_shapes(config)
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")) or name == "head_bias":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, scale, size=shape)
            if name == "head_proj":
                tensors[name] *= HEAD_INIT_GAIN
    return PolicyParams(config, tensors)


def _sub(tensors: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def _add_sub(grads: dict, prefix: str, sub: dict) -> None:
    for k, v in sub.items():
        grads[f"{prefix}.{k}"] += v


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    enc_tok: np.ndarray    # (B, Le)
    enc_pos: np.ndarray
    enc_kind: np.ndarray
    dec_frames: np.ndarray  # (B, Ld, C)
    dec_pos: np.ndarray
    dec_kind: np.ndarray
    bos: int               # decoder index of the BOS frame
    targets: np.ndarray    # (B, Tg, C)
    tmask: np.ndarray      # (B, Tg) bool

    @property
    def size(self) -> int:
        return self.enc_tok.shape[0]


def _strip_eos(frames: np.ndarray, vocab: AudioVocab) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64).reshape(-1, vocab.channels)
    eos_at = np.flatnonzero(frames[:, CONTENT] == vocab.eos)
    return frames[: eos_at[0]] if len(eos_at) else frames


def make_batch(cfg: ModelConfig, prompts, gen_inputs, targets=None,
               drop_text=None, drop_ctx=None) -> Batch:
    """Pack prompts plus decoder inputs (frames after BOS) into padded arrays.

    Context clips are left-padded so that BOS sits at the same index for
    every row; generated frames are right-padded.
    """
    vocab = cfg.vocab
    b = len(prompts)
    drop_text = np.zeros(b, bool) if drop_text is None else np.asarray(drop_text, bool)
    drop_ctx = np.zeros(b, bool) if drop_ctx is None else np.asarray(drop_ctx, bool)

    texts = [np.asarray(p.text, dtype=np.int64) for p in prompts]
    for t in texts:
        if len(t) > cfg.max_text_len:
            raise LengthExceeded(f"text length {len(t)} > {cfg.max_text_len}")
        if len(t) and (t.min() < 0 or t.max() >= TEXT_VOCAB):
            raise InvalidInput("text token out of byte range")
    le = max(1 if dt else len(t) + 1 for t, dt in zip(texts, drop_text))
    enc_tok = np.zeros((b, le), np.int64)
    enc_pos = np.zeros((b, le), np.int64)
    enc_kind = np.zeros((b, le), np.int64)
    for i, (t, dt) in enumerate(zip(texts, drop_text)):
        if dt:
            enc_kind[i, 0] = _NULL
        else:
            n = len(t)
            enc_tok[i, :n] = t
            enc_pos[i, : n + 1] = np.arange(n + 1)
            enc_kind[i, :n] = _TOK
            enc_kind[i, n] = _EOT

    ctxs = [_strip_eos(p.context, vocab) for p in prompts]
    for c in ctxs:
        if len(c) > cfg.max_context_len:
            raise LengthExceeded(f"context length {len(c)} > {cfg.max_context_len}")
    gens = [np.asarray(g, dtype=np.int64).reshape(-1, vocab.channels) for g in gen_inputs]
    for g in gens:
        if len(g) + 1 > cfg.max_frames:
            raise LengthExceeded(f"prefix length {len(g)} >= max_frames {cfg.max_frames}")
    s = max(1 if dc else len(c) for c, dc in zip(ctxs, drop_ctx))
    tg = 1 + max(len(g) for g in gens)
    ld = s + tg
    dec_frames = np.zeros((b, ld, vocab.channels), np.int64)
    dec_pos = np.zeros((b, ld), np.int64)
    dec_kind = np.zeros((b, ld), np.int64)
    for i, (c, dc, g) in enumerate(zip(ctxs, drop_ctx, gens)):
        if dc:
            dec_kind[i, s - 1] = _NULL
        else:
            n = len(c)
            dec_frames[i, s - n:s] = c
            dec_pos[i, s - n:s] = np.arange(n)
            dec_kind[i, s - n:s] = _CTX
        n = len(g) + 1
        dec_frames[i, s] = vocab.bos_frame()
        dec_frames[i, s + 1:s + n] = g
        dec_pos[i, s:s + n] = np.arange(n)
        dec_kind[i, s:s + n] = _GEN

    tgt = np.zeros((b, tg, vocab.channels), np.int64)
    tmask = np.zeros((b, tg), bool)
    if targets is not None:
        for i, y in enumerate(targets):
            y = np.asarray(y, dtype=np.int64).reshape(-1, vocab.channels)
            tgt[i, : len(y)] = y
            tmask[i, : len(y)] = True
    return Batch(enc_tok, enc_pos, enc_kind, dec_frames, dec_pos, dec_kind, s, tgt, tmask)


def teacher_forced_batch(cfg: ModelConfig, prompts, responses, drop_text=None, drop_ctx=None) -> Batch:
    responses = [np.asarray(r, dtype=np.int64).reshape(-1, cfg.channels) for r in responses]
    if any(len(r) == 0 for r in responses):
        raise InvalidInput("responses must contain at least one frame")
    return make_batch(cfg, prompts, [r[:-1] for r in responses], responses, drop_text, drop_ctx)


# ---------------------------------------------------------------------------
# forward / backward


def _key_mask(valid) -> np.ndarray:
    return np.where(valid, 0.0, nn.MASK_VALUE)[:, None, None, :]


def _embed_enc(t: dict, batch: Batch) -> np.ndarray:
    b, le = batch.enc_tok.shape
    x = np.zeros((b, le, t["text_emb"].shape[1]))
    tok = batch.enc_kind == _TOK
    eot = batch.enc_kind == _EOT
    x[tok] = t["text_emb"][batch.enc_tok[tok]]
    x[eot] = t["eot"]
    x[tok | eot] += t["enc_pos"][batch.enc_pos[tok | eot]]
    x[batch.enc_kind == _NULL] = t["null_text"]
    return x


def _embed_enc_bwd(g: dict, batch: Batch, dx) -> None:
    tok = batch.enc_kind == _TOK
    eot = batch.enc_kind == _EOT
    np.add.at(g["text_emb"], batch.enc_tok[tok], dx[tok])
    g["eot"] += dx[eot].sum(0)
    np.add.at(g["enc_pos"], batch.enc_pos[tok | eot], dx[tok | eot])
    g["null_text"] += dx[batch.enc_kind == _NULL].sum(0)


def _embed_frames(t: dict, frames, pos, kind) -> np.ndarray:
    """Embeddings for frame rows (any leading shape)."""
    x = np.zeros(frames.shape[:-1] + (t["seg"].shape[1],))
    real = (kind == _CTX) | (kind == _GEN)
    for c in range(frames.shape[-1]):
        x[real] += t["audio_emb"][c][frames[..., c][real]]
    x[real] += t["dec_pos"][pos[real]]
    x[kind == _CTX] += t["seg"][0]
    x[kind == _GEN] += t["seg"][1]
    x[kind == _NULL] = t["null_ctx"]
    return x


def _embed_frames_bwd(g: dict, batch: Batch, dx) -> None:
    kind = batch.dec_kind
    real = (kind == _CTX) | (kind == _GEN)
    dreal = dx[real]
    for c in range(batch.dec_frames.shape[-1]):
        np.add.at(g["audio_emb"][c], batch.dec_frames[..., c][real], dreal)
    np.add.at(g["dec_pos"], batch.dec_pos[real], dreal)
    g["seg"][0] += dx[kind == _CTX].sum(0)
    g["seg"][1] += dx[kind == _GEN].sum(0)
    g["null_ctx"] += dx[kind == _NULL].sum(0)


def _encode(pp: PolicyParams, batch: Batch):
    t, h = pp.tensors, pp.config.n_heads
    x = _embed_enc(t, batch)
    mask = _key_mask(batch.enc_kind != _PAD)
    caches = []
    for i in range(pp.config.n_enc_layers):
        w = _sub(t, f"enc.{i}")
        a, c1 = nn.layernorm_fwd(x, w["ln1.g"], w["ln1.b"])
        o, c2 = nn.attention_fwd(a, a, _sub(w, "attn"), mask, h)
        x = x + o
        a, c3 = nn.layernorm_fwd(x, w["ln2.g"], w["ln2.b"])
        o, c4 = nn.ffn_fwd(a, _sub(w, "ff"))
        x = x + o
        caches.append((c1, c2, c3, c4))
    mem, cf = nn.layernorm_fwd(x, t["enc_lnf.g"], t["enc_lnf.b"])
    return mem, (caches, cf)


def _encode_bwd(pp: PolicyParams, batch: Batch, cache, dmem, g: dict) -> None:
    t, h = pp.tensors, pp.config.n_heads
    caches, cf = cache
    dx, dgf, dbf = nn.layernorm_bwd(dmem, cf)
    g["enc_lnf.g"] += dgf
    g["enc_lnf.b"] += dbf
    for i in reversed(range(pp.config.n_enc_layers)):
        w = _sub(t, f"enc.{i}")
        c1, c2, c3, c4 = caches[i]
        da, gw = nn.ffn_bwd(dx, c4, _sub(w, "ff"))
        _add_sub(g, f"enc.{i}.ff", gw)
        dln, dg_, db_ = nn.layernorm_bwd(da, c3)
        g[f"enc.{i}.ln2.g"] += dg_
        g[f"enc.{i}.ln2.b"] += db_
        dx = dx + dln
        dq, dkv, gw = nn.attention_bwd(dx, c2, _sub(w, "attn"), h)
        _add_sub(g, f"enc.{i}.attn", gw)
        dln, dg_, db_ = nn.layernorm_bwd(dq + dkv, c1)
        g[f"enc.{i}.ln1.g"] += dg_
        g[f"enc.{i}.ln1.b"] += db_
        dx = dx + dln
    _embed_enc_bwd(g, batch, dx)


def _decode(pp: PolicyParams, batch: Batch, mem):
    t, h = pp.tensors, pp.config.n_heads
    x = _embed_frames(t, batch.dec_frames, batch.dec_pos, batch.dec_kind)
    ld = x.shape[1]
    causal = np.triu(np.full((ld, ld), nn.MASK_VALUE), 1)[None, None]
    self_mask = causal + _key_mask(batch.dec_kind != _PAD)
    cross_mask = _key_mask(batch.enc_kind != _PAD)
    caches = []
    for i in range(pp.config.n_dec_layers):
        w = _sub(t, f"dec.{i}")
        a, c1 = nn.layernorm_fwd(x, w["ln1.g"], w["ln1.b"])
        o, c2 = nn.attention_fwd(a, a, _sub(w, "self"), self_mask, h)
        x = x + o
        a, c3 = nn.layernorm_fwd(x, w["ln2.g"], w["ln2.b"])
        o, c4 = nn.attention_fwd(a, mem, _sub(w, "cross"), cross_mask, h)
        x = x + o
        a, c5 = nn.layernorm_fwd(x, w["ln3.g"], w["ln3.b"])
        o, c6 = nn.ffn_fwd(a, _sub(w, "ff"))
        x = x + o
        caches.append((c1, c2, c3, c4, c5, c6))
    z, cf = nn.layernorm_fwd(x[:, batch.bos:], t["dec_lnf.g"], t["dec_lnf.b"])
    return z, (caches, cf, x.shape)


def _decode_bwd(pp: PolicyParams, batch: Batch, cache, dz, g: dict):
    t, h = pp.tensors, pp.config.n_heads
    caches, cf, xshape = cache
    dzx, dgf, dbf = nn.layernorm_bwd(dz, cf)
    g["dec_lnf.g"] += dgf
    g["dec_lnf.b"] += dbf
    dx = np.zeros(xshape)
    dx[:, batch.bos:] = dzx
    dmem = 0.0
    for i in reversed(range(pp.config.n_dec_layers)):
        w = _sub(t, f"dec.{i}")
        c1, c2, c3, c4, c5, c6 = caches[i]
        da, gw = nn.ffn_bwd(dx, c6, _sub(w, "ff"))
        _add_sub(g, f"dec.{i}.ff", gw)
        dln, dg_, db_ = nn.layernorm_bwd(da, c5)
        g[f"dec.{i}.ln3.g"] += dg_
        g[f"dec.{i}.ln3.b"] += db_
        dx = dx + dln
        dq, dkv, gw = nn.attention_bwd(dx, c4, _sub(w, "cross"), h)
        _add_sub(g, f"dec.{i}.cross", gw)
        dmem = dmem + dkv
        dln, dg_, db_ = nn.layernorm_bwd(dq, c3)
        g[f"dec.{i}.ln2.g"] += dg_
        g[f"dec.{i}.ln2.b"] += db_
        dx = dx + dln
        dq, dkv, gw = nn.attention_bwd(dx, c2, _sub(w, "self"), h)
        _add_sub(g, f"dec.{i}.self", gw)
        dln, dg_, db_ = nn.layernorm_bwd(dq + dkv, c1)
        g[f"dec.{i}.ln1.g"] += dg_
        g[f"dec.{i}.ln1.b"] += db_
        dx = dx + dln
    _embed_frames_bwd(g, batch, dx)
    return dmem


def _head_logits(t: dict, z, c: int):
    u = z @ t["head_proj"][c]
    logits = u @ t["audio_emb"][c].T + t["head_bias"][c]
    # BOS only ever starts the decoder input; it is never a valid output
    logits[..., -1] = nn.MASK_VALUE
    return u, logits


def _forward(pp: PolicyParams, batch: Batch):
    mem, enc_cache = _encode(pp, batch)
    z, dec_cache = _decode(pp, batch, mem)
    return z, (mem, enc_cache, dec_cache)


def token_logprobs(pp: PolicyParams, batch: Batch, keep_cache: bool = False):
    """Per-token log-probabilities of ``batch.targets``, shape (B, Tg, C); zero where masked."""
    z, cache = _forward(pp, batch)
    t = pp.tensors
    lp = np.zeros(batch.targets.shape)
    head_cache = []
    for c in range(pp.config.channels):
        u, logits = _head_logits(t, z, c)
        logp = nn.log_softmax(logits)
        lp[..., c] = np.take_along_axis(logp, batch.targets[..., c:c + 1], -1)[..., 0]
        head_cache.append((u, logp))
    lp *= batch.tmask[..., None]
    if keep_cache:
        return lp, (z, cache, head_cache)
    return lp


def token_logprobs_bwd(pp: PolicyParams, batch: Batch, cache, dlp) -> dict:
    """Gradient of ``sum(dlp * lp)`` with respect to every parameter."""
    z, (mem, enc_cache, dec_cache), head_cache = cache
    t = pp.tensors
    g = pp.zeros_like()
    dlp = dlp * batch.tmask[..., None]
    dz = np.zeros_like(z)
    for c in range(pp.config.channels):
        u, logp = head_cache[c]
        w = dlp[..., c][..., None]
        dlogits = -np.exp(logp) * w
        np.put_along_axis(
            dlogits, batch.targets[..., c:c + 1],
            np.take_along_axis(dlogits, batch.targets[..., c:c + 1], -1) + w, -1,
        )
        g["head_bias"][c] += dlogits.sum((0, 1))
        g["audio_emb"][c] += nn.outer_sum(dlogits, u)
        du = dlogits @ t["audio_emb"][c]
        g["head_proj"][c] += nn.outer_sum(z, du)
        dz += du @ t["head_proj"][c].T
    dmem = _decode_bwd(pp, batch, dec_cache, dz, g)
    _encode_bwd(pp, batch, enc_cache, dmem, g)
    return g


# ---------------------------------------------------------------------------
# likelihood API


def _drop_flags(n, drop):
    if drop is None:
        return None, None
    drop = np.asarray(drop, bool)
    return drop, drop


def log_probs(pp: PolicyParams, prompts, responses, drop=None) -> np.ndarray:
    """Sequence log-likelihoods summed over frames and channels, one per row."""
    dt, dc = _drop_flags(len(prompts), drop)
    batch = teacher_forced_batch(pp.config, prompts, responses, dt, dc)
    return token_logprobs(pp, batch).sum((1, 2))


def log_prob(pp: PolicyParams, prompt: Prompt, response) -> float:
    return float(log_probs(pp, [prompt], [response])[0])


def logprob_with_backward(pp: PolicyParams, prompts, responses, drop=None):
    """Per-row log-likelihoods plus a closure mapping row weights to the gradient
    of ``sum_i weights[i] * logp_i``."""
    dt, dc = _drop_flags(len(prompts), drop)
    batch = teacher_forced_batch(pp.config, prompts, responses, dt, dc)
    lp, cache = token_logprobs(pp, batch, keep_cache=True)

    def backward(weights) -> dict:
        w = np.asarray(weights, dtype=np.float64)
        return token_logprobs_bwd(pp, batch, cache, np.broadcast_to(w[:, None, None], lp.shape))

    return lp.sum((1, 2)), backward


def logprob_and_grad(pp: PolicyParams, prompts, responses, weights, drop=None):
    """Return per-row log-likelihoods and the gradient of ``sum_i weights[i] * logp_i``."""
    lp, backward = logprob_with_backward(pp, prompts, responses, drop)
    return lp, backward(weights)


def grad_log_prob(pp: PolicyParams, prompt: Prompt, response) -> dict:
    return logprob_and_grad(pp, [prompt], [response], [1.0])[1]


def next_frame_logits(pp: PolicyParams, prompt: Prompt, prefix=(), drop_text=False,
                      drop_context=False) -> np.ndarray:
    """Logits (C, V) for the frame following BOS + ``prefix``."""
    cfg = pp.config
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1, cfg.channels)
    if len(prefix) + 1 > cfg.max_frames:
        raise LengthExceeded(f"prefix of {len(prefix)} frames reaches max_frames={cfg.max_frames}")
    batch = make_batch(cfg, [prompt], [prefix], None, [drop_text], [drop_context])
    z, _ = _forward(pp, batch)
    last = z[:, len(prefix)]
    return np.stack([_head_logits(pp.tensors, last, c)[1][0] for c in range(cfg.channels)])


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampledResponse:
    response: np.ndarray
    logprob_conditional: float
    sampled_with_cfg: bool
    cfg_scale: float


class _IncrementalDecoder:
    """KV-cached decoder for a batch of prompts (forward only)."""

    def __init__(self, pp: PolicyParams, prompts, drop: bool, max_steps: int):
        cfg = pp.config
        self.pp, self.h = pp, cfg.n_heads
        n = len(prompts)
        flags = np.full(n, drop)
        batch = make_batch(cfg, prompts, [np.zeros((0, cfg.channels), np.int64)] * n, None, flags, flags)
        t = pp.tensors
        mem, _ = _encode(pp, batch)
        self.cross_mask = _key_mask(batch.enc_kind != _PAD)
        x = _embed_frames(t, batch.dec_frames, batch.dec_pos, batch.dec_kind)
        ld = x.shape[1]
        cap = ld + max_steps
        self.valid = np.zeros((n, cap), bool)
        self.valid[:, :ld] = batch.dec_kind != _PAD
        self.length = ld
        causal = np.triu(np.full((ld, ld), nn.MASK_VALUE), 1)[None, None]
        mask = causal + _key_mask(self.valid[:, :ld])
        self.layers = []
        for i in range(cfg.n_dec_layers):
            w = _sub(t, f"dec.{i}")
            a, _ = nn.layernorm_fwd(x, w["ln1.g"], w["ln1.b"])
            o, c2 = nn.attention_fwd(a, a, _sub(w, "self"), mask, self.h)
            k = np.zeros(c2[3].shape[:2] + (cap,) + c2[3].shape[3:])
            v = np.zeros_like(k)
            k[:, :, :ld], v[:, :, :ld] = c2[3], c2[4]
            x = x + o
            a, _ = nn.layernorm_fwd(x, w["ln2.g"], w["ln2.b"])
            cw = _sub(w, "cross")
            ck = nn._split(mem @ cw["wk"], self.h)
            cv = nn._split(mem @ cw["wv"], self.h)
            o, _ = nn.attention_fwd(a, mem, cw, self.cross_mask, self.h)
            x = x + o
            a, _ = nn.layernorm_fwd(x, w["ln3.g"], w["ln3.b"])
            o, _ = nn.ffn_fwd(a, _sub(w, "ff"))
            x = x + o
            self.layers.append((w, k, v, ck, cv))
        self.last = x[:, -1]

    def _attend(self, xq, w, k, v, mask):
        q = nn._split(xq @ w["wq"], self.h)
        p = nn.softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(q.shape[-1]) + mask)
        return nn._merge(p @ v) @ w["wo"]

    def logits(self) -> np.ndarray:
        t = self.pp.tensors
        z, _ = nn.layernorm_fwd(self.last, t["dec_lnf.g"], t["dec_lnf.b"])
        return np.stack([_head_logits(t, z, c)[1] for c in range(self.pp.config.channels)], 1)

    def push(self, frames: np.ndarray, pos: int) -> None:
        t = self.pp.tensors
        n = frames.shape[0]
        kind = np.full(n, _GEN)
        x = _embed_frames(t, frames[:, None, :], np.full((n, 1), pos), kind[:, None])
        j = self.length
        self.valid[:, j] = True
        self.length += 1
        self_mask = _key_mask(self.valid[:, : self.length])
        for w, k, v, ck, cv in self.layers:
            a, _ = nn.layernorm_fwd(x, w["ln1.g"], w["ln1.b"])
            sw = _sub(w, "self")
            k[:, :, j] = nn._split(a @ sw["wk"], self.h)[:, :, 0]
            v[:, :, j] = nn._split(a @ sw["wv"], self.h)[:, :, 0]
            x = x + self._attend(a, sw, k[:, :, : self.length], v[:, :, : self.length], self_mask)
            a, _ = nn.layernorm_fwd(x, w["ln2.g"], w["ln2.b"])
            x = x + self._attend(a, _sub(w, "cross"), ck, cv, self.cross_mask)
            a, _ = nn.layernorm_fwd(x, w["ln3.g"], w["ln3.b"])
            o, _ = nn.ffn_fwd(a, _sub(w, "ff"))
            x = x + o
        self.last = x[:, -1]


def guided_logits(cond, uncond, cfg_scale: float):
    return uncond + cfg_scale * (cond - uncond)


def sample_responses(pp: PolicyParams, prompts, temperature: float, use_cfg, cfg_scale: float,
                     rng: np.random.Generator, greedy: bool = False) -> list:
    """Sample one response per prompt; ``use_cfg`` is a per-row flag.

    ``greedy`` takes the argmax of the (guided) logits, the zero-temperature
    limit. Recorded log-probabilities are always those of the conditional
    model at temperature 1.

    ``rng`` is either one generator shared by the batch or a sequence with one
    generator per prompt; the latter makes each response independent of
    which other prompts share its batch.
    """
    if not temperature > 0 or not np.isfinite(temperature):
        raise InvalidInput(f"temperature must be > 0, got {temperature}")
    cfg = pp.config
    vocab = cfg.vocab
    n = len(prompts)
    per_row = not isinstance(rng, np.random.Generator)
    if per_row and len(rng) != n:
        raise InvalidInput(f"{len(rng)} generators for {n} prompts")
    use_cfg = np.broadcast_to(np.asarray(use_cfg, bool), (n,)).copy()
    limits = np.array([max_response_frames(cfg, len(p.text)) for p in prompts])
    steps = int(limits.max())
    cond = _IncrementalDecoder(pp, prompts, False, steps)
    cfg_rows = np.flatnonzero(use_cfg)
    uncond = _IncrementalDecoder(pp, [prompts[i] for i in cfg_rows], True, steps) if len(cfg_rows) else None

    out = np.zeros((n, steps, cfg.channels), np.int64)
    lengths = np.zeros(n, np.int64)
    logp = np.zeros(n)
    active = np.ones(n, bool)
    for step in range(steps):
        lc = cond.logits()  # (n, C, V)
        lg = lc.copy()
        if uncond is not None:
            lg[cfg_rows] = guided_logits(lc[cfg_rows], uncond.logits(), cfg_scale)
        if per_row:
            u = np.stack([g.random(cfg.channels) for g in rng])
        else:
            u = rng.random((n, cfg.channels))
        if greedy:
            frame = lg.argmax(-1)
        else:
            p = nn.softmax(lg / temperature)
            cdf = np.cumsum(p, -1)
            frame = np.minimum((cdf < u[..., None] * cdf[..., -1:]).sum(-1), vocab.size - 1)
        is_eos = frame[:, CONTENT] == vocab.eos
        frame[is_eos, SPEAKER] = 0
        lpc = nn.log_softmax(lc)
        step_lp = np.take_along_axis(lpc, frame[..., None], -1)[..., 0].sum(-1)
        out[active, step] = frame[active]
        logp[active] += step_lp[active]
        lengths[active] += 1
        active &= ~is_eos & (lengths < limits)
        if not active.any() or step == steps - 1:
            break
        cond.push(frame, step + 1)
        if uncond is not None:
            uncond.push(frame[cfg_rows], step + 1)
    return [
        SampledResponse(out[i, : lengths[i]].copy(), float(logp[i]), bool(use_cfg[i]),
                        float(cfg_scale) if use_cfg[i] else 1.0)
        for i in range(n)
    ]


def sample_response(pp: PolicyParams, prompt: Prompt, temperature: float, use_cfg: bool,
                    cfg_scale: float, rng: np.random.Generator, greedy: bool = False) -> SampledResponse:
    return sample_responses(pp, [prompt], temperature, [use_cfg], cfg_scale, rng, greedy)[0]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, pp: PolicyParams, stage: str, rng_state=None, extra=None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(pp.config),
        "stage": stage,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {f"p/{k}": v for k, v in pp.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8), **arrays)


def load_checkpoint(path):
    """Return ``(PolicyParams, meta)``."""
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version in {path}")
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    cfg = ModelConfig.from_dict(meta["model_config"])
    return PolicyParams(cfg, tensors), meta
