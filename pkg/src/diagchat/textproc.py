"""Shared text normalization and tokenization.

One pinned tokenizer for metrics and corpus statistics so every report is
reproducible; the encoder builds its hashed features on top of the same
word splitter.
"""

from __future__ import annotations

import re

TOKENIZER_ID = "ws-word-lower-v1"

_WORD_RE = re.compile(r"\w+", re.UNICODE)
_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return _WS_RE.sub(" ", text.lower()).strip()


def word_tokens(text: str) -> list[str]:
    """Word tokens of the normalized text; punctuation acts as a separator."""
    return _WORD_RE.findall(normalize(text))
