"""A deterministic toy speech universe and its three judge oracles.

Every language owns an alphabet of text bytes (drawn from a shared symbol
pool, so languages overlap in the symbols they use, much like a phonetic
alphabet) and an injective map from those bytes to content codes. Code
ranges of different languages never intersect, so one multilingual
"recognizer" can invert any language's audio. A speaker is a cycle of four
speaker-channel ids.

The judges mirror the interfaces of an ASR model (``asr_decode``), a speaker
verification model (``speaker_similarity``) and a reference-free quality
estimator (``quality_score``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInput, UnknownSymbol, WorldTooLarge
from .tokens import CONTENT, GARBAGE_TOKEN, SPEAKER, AudioVocab

log = logging.getLogger(__name__)

WORLD_FORMAT_VERSION = 1
SIGNATURE_LEN = 4
TEXT_LEN_RANGE = (4, 16)
QUALITY_VALID_WEIGHT = 0.7
QUALITY_CONSISTENT_WEIGHT = 0.3

# a-z, A-Z, 0-9, then punctuation: printable bytes, so never GARBAGE_TOKEN.
SYMBOL_POOL = (tuple(range(97, 123)) + tuple(range(65, 91)) + tuple(range(48, 58))
               + tuple(b for b in range(33, 127) if not chr(b).isalnum()))


@dataclass(frozen=True)
class SynthLanguage:
    language_id: int
    alphabet: tuple
    content_map: dict  # text byte -> content code

    def codes(self) -> np.ndarray:
        return np.array([self.content_map[a] for a in self.alphabet], dtype=np.int64)


@dataclass(frozen=True)
class SynthSpeaker:
    speaker_id: int
    signature: tuple


@dataclass(frozen=True)
class RawScores:
    cer: float
    ssim: float
    pesq: float


@dataclass(frozen=True)
class Prompt:
    """Text to speak plus a reference clip of the target speaker."""

    text: np.ndarray
    context: np.ndarray
    language_id: int = -1
    speaker_id: int = -1


@dataclass(frozen=True)
class PairedExample:
    language_id: int
    speaker_id: int
    text: np.ndarray
    context_audio: np.ndarray
    target_audio: np.ndarray

    @property
    def prompt(self) -> Prompt:
        return Prompt(self.text, self.context_audio, self.language_id, self.speaker_id)


@dataclass
class World:
    seed: int
    vocab: AudioVocab
    languages: list
    speakers: list
    _code_to_text: dict = field(default_factory=dict, repr=False)
    _speaker_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for lang in self.languages:
            for sym, code in lang.content_map.items():
                self._code_to_text[code] = sym
        for spk in self.speakers:
            for sid in spk.signature:
                self._speaker_of[sid] = spk.speaker_id

    def language(self, language_id: int) -> SynthLanguage:
        for lang in self.languages:
            if lang.language_id == language_id:
                return lang
        raise InvalidInput(f"no language {language_id} in world")

    def speaker(self, speaker_id: int) -> SynthSpeaker:
        return self.speakers[speaker_id]

    def is_valid_code(self, code: int) -> bool:
        return int(code) in self._code_to_text

    def text_of_code(self, code: int) -> int:
        return self._code_to_text.get(int(code), GARBAGE_TOKEN)

    def to_json(self) -> str:
        doc = {
            "format_version": WORLD_FORMAT_VERSION,
            "seed": self.seed,
            "audio_vocab": self.vocab.size,
            "channels": self.vocab.channels,
            "languages": [
                {
                    "language_id": lang.language_id,
                    "alphabet": list(lang.alphabet),
                    "content_codes": [lang.content_map[a] for a in lang.alphabet],
                }
                for lang in self.languages
            ],
            "speakers": [
                {"speaker_id": s.speaker_id, "signature": list(s.signature)} for s in self.speakers
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "World":
        doc = json.loads(text)
        if doc.get("format_version") != WORLD_FORMAT_VERSION:
            raise InvalidInput(f"unsupported world format {doc.get('format_version')!r}")
        vocab = AudioVocab(doc["audio_vocab"], doc["channels"])
        langs = [
            SynthLanguage(
                d["language_id"],
                tuple(d["alphabet"]),
                dict(zip(d["alphabet"], d["content_codes"])),
            )
            for d in doc["languages"]
        ]
        spks = [SynthSpeaker(d["speaker_id"], tuple(d["signature"])) for d in doc["speakers"]]
        return cls(doc["seed"], vocab, langs, spks)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(Path(path).read_text())


def gen_world(seed: int, n_languages: int, n_speakers: int, alphabet_size: int = 16,
              vocab: AudioVocab | None = None, pool_size: int | None = None,
              n_core: int | None = None) -> World:
    """Draw languages and speakers deterministically from ``seed``.

    ``pool_size`` is the number of distinct text symbols shared by all
    languages; each alphabet is a random subset of that pool. When
    ``n_core`` is given, the first ``n_core`` alphabets are drawn so that
    together they use every pool symbol at least once.
    """
    vocab = vocab or AudioVocab()
    n_reserved = len(vocab.reserved)
    if n_languages < 1 or n_speakers < 1 or alphabet_size < 1:
        raise InvalidInput("world needs at least one language, speaker and symbol")
    if n_languages * alphabet_size + n_reserved > vocab.size:
        raise WorldTooLarge(
            f"{n_languages} languages x {alphabet_size} codes + {n_reserved} reserved "
            f"exceeds audio vocabulary {vocab.size}"
        )
    if n_speakers * SIGNATURE_LEN + n_reserved > vocab.size:
        raise WorldTooLarge(f"{n_speakers} speakers do not fit in vocabulary {vocab.size}")
    if pool_size is None:
        pool_size = min(len(SYMBOL_POOL), 2 * alphabet_size)
    if not alphabet_size <= pool_size <= len(SYMBOL_POOL):
        raise InvalidInput(f"pool_size must lie in [{alphabet_size}, {len(SYMBOL_POOL)}]")

    if n_core is not None and not (1 <= n_core <= n_languages and n_core * alphabet_size >= pool_size):
        raise InvalidInput(f"{n_core} core alphabets of size {alphabet_size} cannot cover {pool_size} symbols")

    rng = np.random.default_rng(seed)
    pool = np.array(SYMBOL_POOL[:pool_size])
    usable = np.array([i for i in range(vocab.size) if i not in vocab.reserved])
    alphabets = _core_alphabets(rng, pool, n_core, alphabet_size) if n_core else []
    while len(alphabets) < n_languages:
        alphabets.append(rng.choice(pool, alphabet_size, replace=False))

    content_ids = rng.permutation(usable)
    languages = []
    for lid in range(n_languages):
        alphabet = tuple(int(a) for a in np.sort(alphabets[lid]))
        codes = content_ids[lid * alphabet_size:(lid + 1) * alphabet_size]
        languages.append(SynthLanguage(lid, alphabet, {a: int(c) for a, c in zip(alphabet, codes)}))

    speaker_ids = rng.permutation(usable)
    speakers = [
        SynthSpeaker(sid, tuple(int(x) for x in speaker_ids[sid * SIGNATURE_LEN:(sid + 1) * SIGNATURE_LEN]))
        for sid in range(n_speakers)
    ]
    return World(seed, vocab, languages, speakers)


def _core_alphabets(rng, pool, n_core: int, size: int) -> list:
    # deal the shuffled pool round-robin, then top every alphabet up at random
    shuffled = rng.permutation(pool)
    dealt = [list(shuffled[i::n_core]) for i in range(n_core)]
    out = []
    for own in dealt:
        rest = np.setdiff1d(pool, own)
        extra = rng.choice(rest, size - len(own), replace=False) if size > len(own) else []
        out.append(np.array(own + list(extra)))
    return out


def synthesize_reference(world: World, lang: SynthLanguage, spk: SynthSpeaker, text) -> np.ndarray:
    """Ground-truth audio: one frame per symbol, then an EOS frame."""
    text = np.asarray(text, dtype=np.int64)
    frames = np.zeros((len(text) + 1, world.vocab.channels), dtype=np.int64)
    for i, sym in enumerate(text):
        try:
            frames[i, CONTENT] = lang.content_map[int(sym)]
        except KeyError:
            raise UnknownSymbol(f"symbol {int(sym)} not in language {lang.language_id}") from None
        frames[i, SPEAKER] = spk.signature[i % SIGNATURE_LEN]
    frames[-1] = world.vocab.eos_frame()
    return frames


def _body(world: World, audio) -> np.ndarray:
    """Frames before the first EOS."""
    audio = np.asarray(audio, dtype=np.int64).reshape(-1, world.vocab.channels)
    eos_at = np.flatnonzero(audio[:, CONTENT] == world.vocab.eos)
    return audio[: eos_at[0]] if len(eos_at) else audio


def asr_decode(audio, world: World) -> np.ndarray:
    body = _body(world, audio)
    return np.array([world.text_of_code(c) for c in body[:, CONTENT]], dtype=np.int64)


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a = list(a)
    b = list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def character_error_rate(ref, hyp) -> float:
    ref = np.asarray(ref).tolist()
    if len(ref) == 0:
        raise InvalidInput("CER needs a non-empty reference")
    return min(1.0, edit_distance(ref, np.asarray(hyp).tolist()) / len(ref))


def speaker_embedding(world: World, audio, kind: str = "unigram") -> np.ndarray:
    """L2-normalised histogram of speaker-channel ids (or id bigrams)."""
    ids = _body(world, audio)[:, SPEAKER]
    v = world.vocab.size
    if kind == "unigram":
        hist = np.bincount(ids, minlength=v).astype(np.float64)
    elif kind == "bigram":
        hist = np.bincount(ids[:-1] * v + ids[1:], minlength=v * v).astype(np.float64)
    else:
        raise InvalidInput(f"unknown speaker embedding {kind!r}")
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def speaker_similarity(context, generated, world: World, kind: str = "unigram") -> float:
    a = speaker_embedding(world, context, kind)
    b = speaker_embedding(world, generated, kind)
    if not a.any() or not b.any():
        log.warning("speaker_similarity: empty or EOS-only audio, scoring 0")
        return 0.0
    return float(np.clip(a @ b, -1.0, 1.0))


def quality_score(audio, world: World) -> float:
    body = _body(world, audio)
    if len(body) == 0:
        return -0.5
    q_valid = np.mean([world.is_valid_code(c) for c in body[:, CONTENT]])
    spk = body[:, SPEAKER]
    q_consistent = max(np.isin(spk, s.signature).mean() for s in world.speakers)
    return float(-0.5 + 5.0 * (QUALITY_VALID_WEIGHT * q_valid + QUALITY_CONSISTENT_WEIGHT * q_consistent))


def score_response(world: World, prompt: Prompt, response, ssim_kind: str = "unigram") -> RawScores:
    hyp = asr_decode(response, world)
    return RawScores(
        cer=character_error_rate(prompt.text, hyp),
        ssim=speaker_similarity(prompt.context, response, world, ssim_kind),
        pesq=quality_score(response, world),
    )


def _random_text(rng, lang: SynthLanguage) -> np.ndarray:
    n = rng.integers(TEXT_LEN_RANGE[0], TEXT_LEN_RANGE[1] + 1)
    return rng.choice(np.array(lang.alphabet, dtype=np.int64), size=n)


def corrupt_content(audio, lang: SynthLanguage, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Swap each content code for a different code of the same language with probability ``rate``.

    Models mispronunciations in recorded data: the result stays a valid
    utterance of the language but no longer matches its transcript exactly.
    """
    out = np.array(audio, dtype=np.int64, copy=True)
    n = len(out) - 1  # trailing EOS frame untouched
    codes = np.array(sorted(lang.content_map.values()))
    hit = rng.random(n) < rate
    for i in np.flatnonzero(hit):
        others = codes[codes != out[i, CONTENT]]
        out[i, CONTENT] = others[rng.integers(len(others))]
    return out


def make_paired_dataset(world: World, language_id: int, n_examples: int, seed: int,
                        noise: float = 0.0) -> list:
    """Triplets of (text, same-speaker context of a different text, target).

    With ``noise > 0`` the target recordings carry content substitutions (see
    :func:`corrupt_content`); texts and contexts are unaffected and the clean
    draws are identical to the ``noise=0`` dataset.
    """
    if n_examples < 1:
        raise InvalidInput("n_examples must be >= 1")
    if not 0.0 <= noise < 1.0:
        raise InvalidInput(f"noise rate {noise} outside [0, 1)")
    lang = world.language(language_id)
    rng = np.random.default_rng([seed, language_id, 0xDA7A])
    noise_rng = np.random.default_rng([seed, language_id, 0x0015E])
    out = []
    for _ in range(n_examples):
        spk = world.speakers[rng.integers(len(world.speakers))]
        text = _random_text(rng, lang)
        ctx_text = _random_text(rng, lang)
        while np.array_equal(ctx_text, text):
            ctx_text = _random_text(rng, lang)
        out.append(PairedExample(
            language_id, spk.speaker_id, text,
            synthesize_reference(world, lang, spk, ctx_text),
            synthesize_reference(world, lang, spk, text),
        ))
    if noise > 0:
        out = [replace(ex, target_audio=corrupt_content(ex.target_audio, lang, noise, noise_rng))
               for ex in out]
    return out


def make_prompt_set(world: World, language_ids, n_per_language: int, seed: int) -> list:
    """Unpaired prompts: the context clip's content is independent of the text."""
    out = []
    for lid in language_ids:
        lang = world.language(lid)
        rng = np.random.default_rng([seed, lid, 0x9E0])
        for _ in range(n_per_language):
            text = _random_text(rng, lang)
            spk = world.speakers[rng.integers(len(world.speakers))]
            ctx = synthesize_reference(world, lang, spk, _random_text(rng, lang))
            out.append(Prompt(text, ctx, lid, spk.speaker_id))
    return out


@dataclass
class Oracles:
    """The three judges bound to one world.

    ``ssim_kind`` picks the speaker embedding: ``"unigram"`` during training,
    optionally ``"bigram"`` for evaluation so that train and eval judges differ.
    """

    world: World
    ssim_kind: str = "unigram"

    def score(self, prompt: Prompt, response) -> RawScores:
        return score_response(self.world, prompt, response, self.ssim_kind)
