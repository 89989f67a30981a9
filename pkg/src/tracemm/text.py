"""Shared text tokenization: lowercase, strip punctuation, split on whitespace.

Hyphens and in-number periods survive so compound descriptors and decimal
values stay single tokens.
"""

from __future__ import annotations

import re

_PUNCT = re.compile(r"[,;:!?()\[\]{}\"'`|/\\*<>=+~@#$%^&_]")
_TRAILING_DOT = re.compile(r"(?<!\d)\.|\.(?!\d)")


def tokenize_text(text: str) -> list[str]:
    cleaned = _PUNCT.sub(" ", text.lower())
    cleaned = _TRAILING_DOT.sub(" ", cleaned)
    return cleaned.split()
