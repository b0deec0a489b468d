"""Manifest ingestion, vocabulary construction, and caption tokenization.

A manifest is UTF-8 JSON lines, one record per line:

    {"id": "clip1", "audio_path": "wavs/clip1.wav", "captions": ["..."], "split": "train"}

An optional header line ``{"refs_per_eval": k}`` declares how many reference
captions every eval entry must carry.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_text, canonical_dumps
from .text import normalize_text, word_tokenize

SPLITS = ("train", "valid", "eval")

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class DataError(Exception):
    """Malformed or inconsistent input data."""


@dataclass
class ManifestEntry:
    id: str
    audio_path: str
    captions: list[str]
    split: str

    def validate(self, line_no: int | None = None) -> None:
        where = f" (line {line_no})" if line_no is not None else ""
        if not self.id or not isinstance(self.id, str):
            raise DataError(f"entry id must be a non-empty string{where}")
        if self.split not in SPLITS:
            raise DataError(f"entry {self.id!r}: split must be one of {SPLITS}{where}")
        if not isinstance(self.captions, list) or not (1 <= len(self.captions) <= 10):
            raise DataError(f"entry {self.id!r}: need 1-10 captions{where}")
        if any(not isinstance(c, str) or not c.strip() for c in self.captions):
            raise DataError(f"entry {self.id!r}: captions must be non-empty strings{where}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "audio_path": self.audio_path,
            "captions": list(self.captions),
            "split": self.split,
        }


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    refs_per_eval: int | None = None
    warnings: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_jsonl(self) -> str:
        lines = []
        if self.refs_per_eval is not None:
            lines.append(canonical_dumps({"refs_per_eval": self.refs_per_eval}))
        lines.extend(canonical_dumps(e.to_record()) for e in self.entries)
        return "\n".join(lines) + "\n"


def load_manifest(path, check_audio: bool = True) -> Manifest:
    """Parse and validate a JSONL manifest.

    Duplicate ids and malformed lines are hard errors; audio files that cannot
    be found are collected as warnings so that text-only workflows still run.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    refs_per_eval = None
    seen_ids: set[str] = set()
    warnings: list[str] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path} line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise DataError(f"{path} line {line_no}: expected a JSON object")
            if line_no == 1 and "id" not in record and "refs_per_eval" in record:
                refs_per_eval = int(record["refs_per_eval"])
                if refs_per_eval < 1:
                    raise DataError(f"{path} line 1: refs_per_eval must be >= 1")
                continue
            missing = {"id", "audio_path", "captions", "split"} - set(record)
            if missing:
                raise DataError(
                    f"{path} line {line_no}: missing fields {sorted(missing)}"
                )
            entry = ManifestEntry(
                id=record["id"],
                audio_path=record["audio_path"],
                captions=record["captions"],
                split=record["split"],
            )
            entry.validate(line_no)
            if entry.id in seen_ids:
                raise DataError(f"{path} line {line_no}: duplicate id {entry.id!r}")
            seen_ids.add(entry.id)
            entries.append(entry)

    manifest = Manifest(entries=entries, refs_per_eval=refs_per_eval)
    if refs_per_eval is not None:
        for e in manifest.split("eval"):
            if len(e.captions) != refs_per_eval:
                raise DataError(
                    f"eval entry {e.id!r} has {len(e.captions)} captions, "
                    f"header declares refs_per_eval={refs_per_eval}"
                )
    if check_audio:
        base = path.parent
        for e in entries:
            audio = Path(e.audio_path)
            if not audio.is_absolute():
                audio = base / audio
            if not audio.exists():
                warnings.append(f"audio file missing for {e.id!r}: {audio}")
        manifest.warnings = warnings
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    atomic_write_text(path, manifest.to_jsonl())


def resolve_audio_path(manifest_path, entry: ManifestEntry) -> Path:
    audio = Path(entry.audio_path)
    if audio.is_absolute():
        return audio
    return Path(manifest_path).parent / audio


class Vocab:
    """Word-level vocabulary with reserved ids 0..3 for pad/bos/eos/unk."""

    def __init__(self, tokens: list[str]):
        for special in SPECIAL_TOKENS:
            if special in tokens:
                raise DataError(f"token {special!r} collides with a special id")
        self.id_to_token = list(SPECIAL_TOKENS) + sorted(set(tokens))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def words(self) -> list[str]:
        return self.id_to_token[len(SPECIAL_TOKENS):]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> str:
        return canonical_dumps({"tokens": self.words})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text)["tokens"])

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(manifest: Manifest, min_count: int = 1, extra_texts=()) -> Vocab:
    """Vocabulary over the train split's captions (metric tokenizer rules).

    Tokens below ``min_count`` fall back to unk.  ``extra_texts`` (for example
    the decoder prompt) are always included regardless of count.
    """
    train = manifest.split("train")
    if not train:
        raise DataError("cannot build vocabulary: train split is empty")
    counts: Counter[str] = Counter()
    for entry in train:
        for caption in entry.captions:
            counts.update(word_tokenize(caption))
    tokens = [t for t, c in counts.items() if c >= min_count]
    for text in extra_texts:
        tokens.extend(word_tokenize(text))
    return Vocab(tokens)


@dataclass
class TokenSeq:
    """bos + caption token ids + eos."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) < 2:
            raise DataError("token sequence needs at least bos and eos")
        if self.ids[0] != BOS_ID or self.ids[-1] != EOS_ID:
            raise DataError("token sequence must start with bos and end with eos")
        interior = self.ids[1:-1]
        if np.any((interior == PAD_ID) | (interior == BOS_ID) | (interior == EOS_ID)):
            raise DataError("token sequence has special ids in the interior")

    def __len__(self) -> int:
        return len(self.ids)


def encode_caption(text: str, vocab: Vocab) -> TokenSeq:
    ids = [BOS_ID] + [vocab.id_of(t) for t in word_tokenize(text)] + [EOS_ID]
    return TokenSeq(np.array(ids, dtype=np.int64))


def decode_tokens(seq: TokenSeq | np.ndarray, vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else np.asarray(seq)
    words = [
        vocab.id_to_token[i]
        for i in ids
        if i not in (PAD_ID, BOS_ID, EOS_ID) and 0 <= i < len(vocab)
    ]
    return " ".join(words)


def normalized(text: str) -> str:
    """Public alias so callers never reach for a different normalizer."""
    return normalize_text(text)
