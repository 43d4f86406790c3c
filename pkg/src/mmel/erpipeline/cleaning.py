"""Text normalization for entity representations."""
from __future__ import annotations

import re
import unicodedata

from mmel.encoders import token_spans

DEFAULT_MAX_TOKENS = 256

_REFERENCE = re.compile(r"\[\d+\]")


def clean_text(raw: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> str:
    """Strip ``[n]`` reference markers and control characters, collapse
    whitespace, and keep at most ``max_tokens`` whole tokens.

    Idempotent: removal runs to a fixed point, and truncation always ends on
    a token boundary.
    """
    text = "".join(
        " " if ch.isspace() else ch
        for ch in raw
        if ch.isspace() or unicodedata.category(ch) not in ("Cc", "Cf")
    )
    while True:
        stripped = _REFERENCE.sub("", text)
        if stripped == text:
            break
        text = stripped
    text = " ".join(text.split())
    spans = token_spans(text)
    if len(spans) > max_tokens:
        text = text[: spans[max_tokens - 1][1]] if max_tokens > 0 else ""
    return text
