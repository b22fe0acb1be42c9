"""Byte-level text tokens and the audio-frame vocabulary layout.

Text uses exactly 256 symbols, one per byte. Audio frames are ``(T, C)``
integer arrays; channel 0 carries content codes and channel 1 carries
speaker codes. The last two content ids are reserved for BOS and EOS, and
id 0 doubles as the pad / "no speaker" id on every channel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

TEXT_VOCAB = 256
GARBAGE_TOKEN = 1
PAD_ID = 0
CONTENT = 0
SPEAKER = 1


def encode_text(raw: bytes) -> np.ndarray:
    if not isinstance(raw, (bytes, bytearray)):
        raise InvalidInput(f"expected bytes, got {type(raw).__name__}")
    if len(raw) == 0:
        raise InvalidInput("cannot encode empty text")
    return np.frombuffer(bytes(raw), dtype=np.uint8).astype(np.int64)


def decode_text(seq) -> bytes:
    arr = np.asarray(seq, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= TEXT_VOCAB):
        raise InvalidInput("text token id out of byte range")
    return arr.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class AudioVocab:
    """Per-channel frame vocabulary with reserved marker ids."""

    size: int = 256
    channels: int = 2

    def __post_init__(self):
        if self.size < 8:
            raise InvalidInput("audio vocabulary must hold at least 8 ids")
        if self.channels < 2:
            raise InvalidInput("need a content and a speaker channel")

    @property
    def bos(self) -> int:
        return self.size - 1

    @property
    def eos(self) -> int:
        return self.size - 2

    @property
    def reserved(self) -> frozenset:
        return frozenset({PAD_ID, self.bos, self.eos})

    def bos_frame(self) -> np.ndarray:
        f = np.zeros(self.channels, dtype=np.int64)
        f[CONTENT] = self.bos
        return f

    def eos_frame(self) -> np.ndarray:
        f = np.zeros(self.channels, dtype=np.int64)
        f[CONTENT] = self.eos
        return f

    def is_well_formed(self, frames: np.ndarray) -> bool:
        """True if ``frames`` ends with exactly one EOS, at the end."""
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.channels or len(frames) == 0:
            return False
        eos_at = np.flatnonzero(frames[:, CONTENT] == self.eos)
        return len(eos_at) == 1 and eos_at[0] == len(frames) - 1
