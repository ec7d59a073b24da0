"""Deterministic frozen span encoder: random token projections + sinusoidal positions.

Stands in for a frozen pretrained sentence encoder. A span of tokens with
absolute 1-based positions maps to a unit L2-norm vector: mean over tokens of
(token vector + positional vector), then normalized. Empty spans map to the
zero vector. Everything is bit-exact across runs: token vectors come from
SplitMix64 keyed by (seed, token id), positions from the standard sinusoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


@dataclass(frozen=True)
class EncoderConfig:
    d_enc: int = 64
    seed: int = 0x5EED_1DE5
    pe_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_enc < 2 or self.d_enc % 2 != 0:
            raise ValueError("d_enc must be even and >= 2")


def _splitmix64(state0: np.uint64, count: int) -> np.ndarray:
    """First `count` outputs of SplitMix64 starting from state0."""
    steps = np.arange(1, count + 1, dtype=np.uint64)
    z = state0 + steps * np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return z


def token_vector(cfg: EncoderConfig, token_id: int) -> np.ndarray:
    """Unit vector whose components are 53-bit uniforms mapped to [-1, 1)."""
    token_id = int(token_id)
    if token_id < 0:
        raise ValueError("token_id must be >= 0")
    state0 = np.uint64((cfg.seed ^ (token_id * _GAMMA)) & 0xFFFFFFFFFFFFFFFF)
    z = _splitmix64(state0, cfg.d_enc)
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    v = 2.0 * u - 1.0
    return v / np.sqrt(np.sum(v * v))


def positional_vector(cfg: EncoderConfig, pos: int) -> np.ndarray:
    """Sinusoidal encoding of an absolute 1-based position."""
    if pos < 1:
        raise ValueError("pos must be >= 1")
    t = np.arange(cfg.d_enc // 2, dtype=np.float64)
    angle = pos / cfg.pe_base ** (2.0 * t / cfg.d_enc)
    out = np.empty(cfg.d_enc, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def encode_span(cfg: EncoderConfig, tokens, start_pos: int = 1) -> np.ndarray:
    """Encode tokens occupying absolute positions start_pos, start_pos+1, ...

    Empty spans return the zero vector (callers treat it as "no content";
    the retrieval mask guarantees it is never attended to).
    """
    tokens = list(tokens)
    if not tokens:
        return np.zeros(cfg.d_enc, dtype=np.float64)
    rows = np.stack(
        [token_vector(cfg, t) + positional_vector(cfg, start_pos + j) for j, t in enumerate(tokens)]
    )
    return _pooled(rows)


def _pooled(rows: np.ndarray) -> np.ndarray:
    v = np.mean(rows, axis=0)
    return v / np.sqrt(np.sum(v * v))


class SpanEncoder:
    """Caching wrapper around the free functions; bit-identical outputs.

    Token vectors are cached for ids < vocab_size and the positional table
    grows on demand, so bulk store construction does not recompute the PRNG
    stream per span.
    """

    def __init__(self, cfg: EncoderConfig, vocab_size: int):
        self.cfg = cfg
        self.tok = np.stack([token_vector(cfg, t) for t in range(vocab_size)])
        self._pos = np.stack([positional_vector(cfg, p) for p in range(1, 17)])

    def _pos_rows(self, start_pos: int, n: int) -> np.ndarray:
        need = start_pos + n - 1
        while self._pos.shape[0] < need:
            grown = np.stack(
                [positional_vector(self.cfg, p) for p in range(1, 2 * self._pos.shape[0] + 1)]
            )
            self._pos = grown
        return self._pos[start_pos - 1 : start_pos - 1 + n]

    def encode(self, tokens, start_pos: int = 1) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            return np.zeros(self.cfg.d_enc, dtype=np.float64)
        rows = self.tok[np.asarray(tokens)] + self._pos_rows(start_pos, len(tokens))
        return _pooled(rows)
