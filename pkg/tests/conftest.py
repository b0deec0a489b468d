"""Shared fixtures: synthetic corpora and trained toy models.

Training fixtures are session-scoped because the acceptance suite, the CLI
tests, and several unit tests all exercise the same trained models; each
fixture records its wall-clock training time for the runtime criteria.
"""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from audiocap.captioner import Captioner, CaptionerConfig
from audiocap.clap import ClapConfig, ClapModel
from audiocap.config import CLAP_PRESETS, TRAIN_PRESETS
from audiocap.dataset import Manifest, build_vocab, load_manifest
from audiocap.numerics import Rng
from audiocap.synthetic import make_corpus
from audiocap.training import TrainConfig, TrainResult, train_captioner, train_clap

PROMPT = "Describe the audio you hear"


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory) -> tuple[Path, Manifest]:
    """50 train pairs: the overfit corpus."""
    root = tmp_path_factory.mktemp("corpus50")
    path = make_corpus(root, n_train=50, n_valid=8, n_eval=8, seed=0)
    return path, load_manifest(path)


@pytest.fixture(scope="session")
def corpus64(tmp_path_factory) -> tuple[Path, Manifest]:
    """64 train clips with three phrasings each: the contrastive-training and
    end-to-end corpus (192 clip/caption pairs)."""
    root = tmp_path_factory.mktemp("corpus64")
    path = make_corpus(root, n_train=64, n_valid=8, n_eval=8, seed=1, captions_per_train=3)
    return path, load_manifest(path)


def _desk_train_config(seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **TRAIN_PRESETS["desk"])


def _desk_clap_config(seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **CLAP_PRESETS["desk"])


def build_toy_captioner(manifest: Manifest, seed: int = 0) -> Captioner:
    vocab = build_vocab(manifest, extra_texts=[PROMPT])
    config = CaptionerConfig(vocab_size=len(vocab))
    return Captioner(config, vocab, Rng(seed).child("captioner_init"))


def build_toy_clap(manifest: Manifest, seed: int = 0) -> ClapModel:
    vocab = build_vocab(manifest, extra_texts=[PROMPT])
    config = ClapConfig(vocab_size=len(vocab))
    return ClapModel(config, vocab, Rng(seed).child("clap_init"))


@pytest.fixture(scope="session")
def overfit_run(corpus50, tmp_path_factory) -> dict:
    """Desk-preset training on the 50-pair corpus; final model, not best ckpt."""
    path, manifest = corpus50
    model = build_toy_captioner(manifest, seed=0)
    out = tmp_path_factory.mktemp("overfit_run")
    start = time.monotonic()
    result = train_captioner(model, manifest, path, _desk_train_config(0), out)
    elapsed = time.monotonic() - start
    return {"model": model, "result": result, "seconds": elapsed,
            "manifest": manifest, "manifest_path": path}


@pytest.fixture(scope="session")
def e2e_captioner(corpus64, tmp_path_factory) -> dict:
    path, manifest = corpus64
    model = build_toy_captioner(manifest, seed=1)
    out = tmp_path_factory.mktemp("e2e_captioner")
    result = train_captioner(model, manifest, path, _desk_train_config(1), out)
    return {"model": model, "result": result, "out": out}


@pytest.fixture(scope="session")
def e2e_clap(corpus64, tmp_path_factory) -> dict:
    path, manifest = corpus64
    model = build_toy_clap(manifest, seed=1)
    out = tmp_path_factory.mktemp("e2e_clap")
    start = time.monotonic()
    result = train_clap(model, manifest, path, _desk_clap_config(1), out)
    elapsed = time.monotonic() - start
    return {"model": model, "result": result, "seconds": elapsed, "out": out}
