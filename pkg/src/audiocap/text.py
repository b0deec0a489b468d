"""Single normalization pipeline shared by the tokenizer and the metrics.

Captions are lowercased and reduced to word tokens; ASCII punctuation is
stripped except apostrophes and hyphens that sit between word characters
("don't", "well-known").  Whitespace collapses to single spaces.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[^\W_]+(?:['-][^\W_]+)*", re.UNICODE)


def word_tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(word_tokenize(text))
