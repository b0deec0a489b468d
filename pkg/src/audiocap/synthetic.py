"""Synthetic clip/caption corpus for end-to-end runs without real datasets.

Each item pairs a short tone with a caption that describes it: the tone's
frequency picks the noun, its amplitude envelope picks the verb, and its
loudness picks the adverb.  Captions are therefore learnable from the audio,
which is what the overfit and retrieval checks need.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_frontend import AudioClip, write_wav
from .dataset import Manifest, ManifestEntry, save_manifest
from .numerics import Rng

SAMPLE_RATE = 16000

NOUNS = [
    ("buzz", 90.0),
    ("drum", 150.0),
    ("hum", 220.0),
    ("horn", 330.0),
    ("bell", 470.0),
    ("chime", 700.0),
    ("ring", 1050.0),
    ("whistle", 1600.0),
    ("hiss", 2400.0),
    ("chirp", 3500.0),
]

VERBS = [
    ("holds", "holding"),
    ("fades", "fading"),
    ("pulses", "pulsing"),
    ("swells", "swelling"),
]

ADVERBS = [
    ("softly", 0.25),
    ("loudly", 0.85),
]


@dataclass
class ToyItem:
    noun: str
    freq: float
    verb: str
    verb_ing: str
    adverb: str
    amplitude: float

    @property
    def caption(self) -> str:
        return f"a {self.noun} {self.verb} {self.adverb}"

    def references(self, count: int) -> list[str]:
        templates = [
            f"a {self.noun} {self.verb} {self.adverb}",
            f"the {self.noun} {self.verb} {self.adverb}",
            f"a {self.noun} is {self.verb_ing} {self.adverb}",
            f"the sound of a {self.noun} {self.verb_ing} {self.adverb}",
            f"one {self.noun} {self.verb} {self.adverb} nearby",
        ]
        return templates[:count]


def _envelope(verb: str, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    if verb == "holds":
        return np.ones(n)
    if verb == "fades":
        return np.exp(-4.0 * t)
    if verb == "pulses":
        return 0.55 + 0.45 * np.sign(np.sin(2.0 * np.pi * 8.0 * t))
    if verb == "swells":
        return 0.1 + 0.9 * t
    raise ValueError(f"unknown verb {verb!r}")


def synthesize(item: ToyItem, duration_s: float, rng: Rng) -> AudioClip:
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    tone = np.sin(2.0 * np.pi * item.freq * t) + 0.3 * np.sin(2.0 * np.pi * 2.0 * item.freq * t)
    noise = rng.normal(0.01, (n,))
    samples = item.amplitude * _envelope(item.verb, n) * tone / 1.3 + noise
    return AudioClip(np.clip(samples, -1.0, 1.0), SAMPLE_RATE)


def all_items() -> list[ToyItem]:
    items = []
    for noun, freq in NOUNS:
        for verb, verb_ing in VERBS:
            for adverb, amp in ADVERBS:
                items.append(
                    ToyItem(
                        noun=noun, freq=freq, verb=verb, verb_ing=verb_ing,
                        adverb=adverb, amplitude=amp,
                    )
                )
    return items


def make_corpus(
    out_dir,
    n_train: int = 50,
    n_valid: int = 8,
    n_eval: int = 8,
    seed: int = 0,
    duration_s: float = 0.6,
    refs_per_eval: int = 3,
    captions_per_train: int = 1,
) -> Path:
    """Write WAV files plus a manifest; returns the manifest path.

    Items are assigned distinct (noun, verb, adverb) combinations, shuffled
    deterministically by seed; the corpus caps at the number of combinations.
    ``captions_per_train`` > 1 gives train clips several phrasings of the same
    content, which keeps the caption distribution multimodal the way real
    multi-annotator datasets are.
    """
    total = n_train + n_valid + n_eval
    items = all_items()
    if total > len(items):
        raise ValueError(
            f"requested {total} items but only {len(items)} distinct combinations exist"
        )
    rng = Rng(seed).child("toy_corpus")
    order = rng.permutation(len(items))
    chosen = [items[int(i)] for i in order[:total]]

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, item in enumerate(chosen):
        if idx < n_train:
            split, captions = "train", item.references(captions_per_train)
        elif idx < n_train + n_valid:
            split, captions = "valid", [item.caption]
        else:
            split, captions = "eval", item.references(refs_per_eval)
        clip = synthesize(item, duration_s, rng.child(f"clip{idx}"))
        wav_name = f"clip_{idx:03d}.wav"
        write_wav(wav_dir / wav_name, clip)
        entries.append(
            ManifestEntry(
                id=f"toy{idx:03d}",
                audio_path=f"wavs/{wav_name}",
                captions=captions,
                split=split,
            )
        )
    manifest = Manifest(entries=entries, refs_per_eval=refs_per_eval)
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest_path
