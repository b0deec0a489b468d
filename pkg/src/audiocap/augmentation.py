"""Sentence-level caption paraphrasing through round-trip translation.

Each caption is translated into a pivot language and back, yielding a rewrite
that restructures the whole sentence instead of swapping single words.  A real
HTTP translation service is driven through a small wire contract (JSON in,
JSON out); an offline stub with a bundled phrase table produces deterministic
paraphrases so the pipeline and its tests run without network access.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

from .dataset import DataError, Manifest, ManifestEntry
from .text import normalize_text, word_tokenize

log = logging.getLogger(__name__)

DEFAULT_PIVOT_LANG = "zh"


class TranslationError(Exception):
    """Client failure after exhausting retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class TranslationRequest:
    text: str
    source_lang: str
    target_lang: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("translation request text must be non-empty")

    def to_json(self) -> str:
        return json.dumps(
            {"text": self.text, "source_lang": self.source_lang, "target_lang": self.target_lang}
        )


@dataclass(frozen=True)
class TranslationResponse:
    text: str

    @classmethod
    def from_json(cls, payload: str) -> "TranslationResponse":
        data = json.loads(payload)
        if not isinstance(data, dict) or "text" not in data:
            raise ValueError("translation response must be a JSON object with a 'text' field")
        return cls(text=str(data["text"]))


@dataclass
class ParaphrasePair:
    original: str
    paraphrase: str
    pivot_lang: str
    identical: bool = False

    def __post_init__(self):
        if not self.paraphrase:
            raise ValueError("paraphrase must be non-empty")


class TranslationClient(Protocol):
    def translate(self, text: str, source_lang: str, target_lang: str) -> str: ...


class HttpTranslationClient:
    """POSTs one JSON object per request and retries transient failures.

    Request body: ``{"text": ..., "source_lang": ..., "target_lang": ...}``;
    response body: ``{"text": ...}``.  The auth token, when set, is sent as a
    bearer Authorization header.
    """

    def __init__(
        self,
        endpoint: str,
        auth_token: str = "",
        timeout_s: float = 10.0,
        max_retries: int = 3,
    ):
        if not endpoint:
            raise ValueError("translation endpoint must be configured")
        self.endpoint = endpoint
        self.auth_token = auth_token
        self.timeout_s = timeout_s
        self.max_retries = max(1, int(max_retries))

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        request = TranslationRequest(text=text, source_lang=source_lang, target_lang=target_lang)
        body = request.to_json().encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_error: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=body, headers=headers, method="POST"
                )
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    payload = resp.read().decode("utf-8")
                return TranslationResponse.from_json(payload).text
            except (urllib.error.URLError, ValueError, OSError) as exc:
                last_error = exc
                log.warning("translation attempt %d/%d failed: %s", attempt, self.max_retries, exc)
        raise TranslationError(
            f"translation failed after {self.max_retries} attempts: {last_error}",
            attempts=self.max_retries,
        )


# Bundled rewrite tables for the offline stub.  Phrase synonyms apply on word
# boundaries, longest phrase first; adverbial relocations rewrite
# "<copula> <adverbial> <verb>ing" by dropping the adverbial and appending its
# tail phrase to the sentence end.
STUB_SYNONYMS: dict[str, str] = {
    "a person": "someone",
    "a gift": "a present",
    "a man": "a gentleman",
    "a woman": "a lady",
    "a child": "a kid",
    "people": "folks",
    "a car": "an automobile",
    "rain": "rainfall",
}

STUB_ADVERBIALS: dict[str, str] = {
    "very carefully": "with great care",
    "very quickly": "in a great hurry",
    "quickly": "in a hurry",
    "slowly": "at a slow pace",
    "loudly": "at high volume",
    "quietly": "in a quiet manner",
}

_COPULAS = r"(?:is|are|was|were)"


class StubTranslationClient:
    """Offline round-trip stand-in: the pivot leg tags the text, the return
    leg applies phrase synonyms, adverbial relocation, and leading-clause
    reordering (a clause before a comma moves to the sentence end).

    Purely deterministic: same input and tables always give the same bytes.
    """

    def __init__(
        self,
        synonyms: dict[str, str] | None = None,
        adverbials: dict[str, str] | None = None,
    ):
        self.synonyms = STUB_SYNONYMS if synonyms is None else dict(synonyms)
        self.adverbials = STUB_ADVERBIALS if adverbials is None else dict(adverbials)

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        if not text:
            raise TranslationError("empty text")
        if target_lang != "en":
            return f"[{target_lang}] {text}"
        return self._paraphrase(self._strip_tag(text))

    @staticmethod
    def _strip_tag(text: str) -> str:
        m = re.match(r"^\[[A-Za-z-]+\]\s*(.*)$", text)
        return m.group(1) if m else text

    def _paraphrase(self, text: str) -> str:
        trailing = ""
        body = text.strip()
        if body and body[-1] in ".!?":
            trailing = body[-1]
            body = body[:-1].strip()
        body = body.lower()

        for phrase in sorted(self.synonyms, key=len, reverse=True):
            body = re.sub(rf"\b{re.escape(phrase)}\b", self.synonyms[phrase], body)

        for adverbial in sorted(self.adverbials, key=len, reverse=True):
            pattern = rf"\b({_COPULAS})\s+{re.escape(adverbial)}\s+(\w+ing)\b"
            m = re.search(pattern, body)
            if m:
                body = body[: m.start()] + f"{m.group(1)} {m.group(2)}" + body[m.end() :]
                body = body.rstrip() + f" {self.adverbials[adverbial]}"
                break

        if "," in body:
            lead, rest = body.split(",", 1)
            lead, rest = lead.strip(), rest.strip()
            if lead and rest:
                body = f"{rest} {lead}"

        body = re.sub(r"\s+", " ", body).strip()
        if body:
            body = body[0].upper() + body[1:]
        return body + trailing


def make_client(
    kind: str,
    endpoint: str = "",
    auth_token: str = "",
    timeout_s: float = 10.0,
    max_retries: int = 3,
) -> TranslationClient:
    if kind == "stub":
        return StubTranslationClient()
    if kind == "http":
        return HttpTranslationClient(
            endpoint, auth_token=auth_token, timeout_s=timeout_s, max_retries=max_retries
        )
    raise ValueError(f"unknown translation client {kind!r} (expected 'stub' or 'http')")


def back_translate(
    caption: str,
    client: TranslationClient,
    pivot_lang: str = DEFAULT_PIVOT_LANG,
) -> ParaphrasePair:
    """Round-trip one caption through the pivot language.

    A paraphrase that normalizes to the same tokens as the original (or comes
    back empty) is still returned, flagged ``identical``; the ambiguity of
    whether to keep such duplicates is resolved by keeping them.
    """
    pivot_text = client.translate(caption, "en", pivot_lang)
    result = client.translate(pivot_text, pivot_lang, "en").strip()
    if not result:
        return ParaphrasePair(
            original=caption, paraphrase=caption, pivot_lang=pivot_lang, identical=True
        )
    identical = normalize_text(result) == normalize_text(caption)
    return ParaphrasePair(
        original=caption, paraphrase=result, pivot_lang=pivot_lang, identical=identical
    )


def augment_manifest(
    manifest: Manifest,
    client: TranslationClient,
    pivot_lang: str = DEFAULT_PIVOT_LANG,
    concurrency: int = 1,
) -> Manifest:
    """Double every train entry's caption list with paraphrases.

    Originals keep their order and come first; captions whose round trip fails
    are skipped (logged, recorded as warnings) rather than aborting the run.
    Valid and eval entries pass through untouched.
    """
    warnings: list[str] = []

    def paraphrase_one(caption: str) -> str | None:
        try:
            return back_translate(caption, client, pivot_lang).paraphrase
        except TranslationError:
            return None

    entries: list[ManifestEntry] = []
    for entry in manifest.entries:
        if entry.split != "train":
            entries.append(
                ManifestEntry(
                    id=entry.id,
                    audio_path=entry.audio_path,
                    captions=list(entry.captions),
                    split=entry.split,
                )
            )
            continue
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                results = list(pool.map(paraphrase_one, entry.captions))
        else:
            results = [paraphrase_one(c) for c in entry.captions]
        paraphrases = []
        for caption, result in zip(entry.captions, results):
            if result is None:
                message = f"entry {entry.id!r}: paraphrase skipped for caption {caption!r}"
                warnings.append(message)
                log.warning("%s", message)
            else:
                paraphrases.append(result)
        entries.append(
            ManifestEntry(
                id=entry.id,
                audio_path=entry.audio_path,
                captions=list(entry.captions) + paraphrases,
                split=entry.split,
            )
        )
    return Manifest(entries=entries, refs_per_eval=manifest.refs_per_eval, warnings=warnings)


def _train_token_set(manifest: Manifest) -> set[str]:
    tokens: set[str] = set()
    for entry in manifest.split("train"):
        for caption in entry.captions:
            tokens.update(word_tokenize(caption))
    return tokens


def vocab_stats(before: Manifest, after: Manifest) -> dict:
    """Vocabulary sizes before/after augmentation plus the new-word list.

    Augmentation must never shrink the vocabulary; a missing token is a data
    error, not a statistic.
    """
    tokens_before = _train_token_set(before)
    tokens_after = _train_token_set(after)
    missing = tokens_before - tokens_after
    if missing:
        raise DataError(
            f"augmented manifest lost {len(missing)} tokens, e.g. {sorted(missing)[:5]}"
        )
    return {
        "vocab_before": len(tokens_before),
        "vocab_after": len(tokens_after),
        "new_words": sorted(tokens_after - tokens_before),
    }
