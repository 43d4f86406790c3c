"""Tokenization, the deterministic toy text encoder and modality projections.

The toy encoder stands in for a frozen pretrained text encoder at desk scale.
Each token gets a Gaussian vector whose stream is a pure function of
``(token, seed)``:

* a 64-bit seed is taken from ``blake2b(f"{seed}\\x1f{salt}\\x1f{token}",
  digest_size=8)`` read little-endian;
* draw ``i`` (1-based) is ``splitmix64_mix(seed64 + i * 0x9E3779B97F4A7C15)``;
* consecutive draw pairs become normals by Box-Muller, using the top 53 bits
  as ``u = (x >> 11 + 0.5) / 2**53``.

Token vectors are mean-pooled over the content tokens and L2-normalized.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from torch import nn

START = "<|startoftext|>"
END = "<|endoftext|>"

MODALITIES = ("mention", "text", "image", "object", "face", "identity", "entity")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]

    def __post_init__(self):
        t = self.tokens
        if len(t) < 2 or t[0] != START or t[-1] != END or START in t[1:] or END in t[:-1]:
            raise ValueError("token sequence must carry exactly one start and one end sentinel")

    @property
    def content(self) -> tuple[str, ...]:
        return self.tokens[1:-1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of the word and punctuation tokens of ``text``."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def content_tokens(text: str) -> list[str]:
    return [text[a:b].casefold() for a, b in token_spans(text)]


def tokenize(text: str) -> TokenSequence:
    """Casefolded word/punctuation tokens wrapped in start/end sentinels."""
    return TokenSequence((START, *content_tokens(text), END))


def _token_seed(token: str, seed: int, salt: int) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{salt}\x1f{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _splitmix_stream(seed64: int, n: int) -> np.ndarray:
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed64) + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=65536)
def token_vector(token: str, seed: int, d: int, salt: int = 0) -> np.ndarray:
    n_pairs = (d + 1) // 2
    raw = _splitmix_stream(_token_seed(token, seed, salt), 2 * n_pairs)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * n_pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    out = out[:d]
    out.setflags(write=False)
    return out


def toy_encode(tokens: TokenSequence | Sequence[str], seed: int, d: int) -> np.ndarray:
    """Unit-norm float64 vector for a token sequence.

    Sentinels are pooled only when the sequence has no content tokens, so
    the empty text still maps to a well-defined unit vector.
    """
    if d < 2:
        raise ValueError("toy encoder needs d >= 2")
    toks = tuple(tokens)
    content = [t for t in toks if t not in (START, END)] or list(toks) or [START, END]
    salt = 0
    while True:
        pooled = np.mean([token_vector(t, seed, d, salt) for t in content], axis=0)
        norm = np.linalg.norm(pooled)
        if norm > 1e-12:
            return pooled / norm
        salt += 1


def encode_text(text: str, seed: int, d: int) -> np.ndarray:
    return toy_encode(tokenize(text), seed, d)


class Projection(nn.Module):
    """Non-linear map ``tanh(x @ W + b)`` into the shared feature space."""

    def __init__(self, d_in: int, d_out: int, modality: str = "mention", init: str = "identity",
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        self.weight = nn.Parameter(torch.empty(d_in, d_out, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        with torch.no_grad():
            if init == "identity":
                self.weight.copy_(torch.eye(d_in, d_out, dtype=dtype))
            elif init == "random":
                bound = (6.0 / (d_in + d_out)) ** 0.5
                self.weight.uniform_(-bound, bound, generator=generator)
            else:
                raise ValueError(f"unknown init {init!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return project(x, self.weight, self.bias)


def project(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != weight.shape[0] or bias.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"shape mismatch: x[..., {x.shape[-1]}] @ W{tuple(weight.shape)} + b{tuple(bias.shape)}"
        )
    return torch.tanh(x @ weight + bias)
