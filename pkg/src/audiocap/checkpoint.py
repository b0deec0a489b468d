"""Checkpoint directory format shared by the captioner and the CLAP model.

A checkpoint is a directory with ``metadata.json`` (tensor names and shapes,
model config, training step, validation loss, plus model-specific extras) and
one raw little-endian float32 file per tensor under ``tensors/``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_bytes, atomic_write_text, canonical_dumps
from .numerics import Tensor

FORMAT_VERSION = 1


def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(
    directory,
    named_params: dict[str, Tensor],
    config: dict,
    step: int,
    valid_loss: float,
    extra: dict | None = None,
) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    metadata = {
        "format_version": FORMAT_VERSION,
        "names": sorted(named_params),
        "shapes": {name: list(t.data.shape) for name, t in named_params.items()},
        "config": config,
        "step": int(step),
        "valid_loss": float(valid_loss),
        "extra": extra or {},
    }
    for name, tensor in named_params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        atomic_write_bytes(directory / "tensors" / _tensor_file(name), blob)
    atomic_write_text(directory / "metadata.json", canonical_dumps(metadata) + "\n")
    return directory


def load_metadata(directory) -> dict:
    meta_path = Path(directory) / "metadata.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"not a checkpoint directory (no metadata.json): {directory}")
    return json.loads(meta_path.read_text(encoding="utf-8"))


def load_checkpoint_into(directory, named_params: dict[str, Tensor]) -> dict:
    """Fill ``named_params`` in place from a checkpoint; returns the metadata."""
    directory = Path(directory)
    metadata = load_metadata(directory)
    names = set(metadata["names"])
    missing = set(named_params) - names
    extra_names = names - set(named_params)
    if missing or extra_names:
        raise ValueError(
            f"checkpoint/model tensor mismatch: missing={sorted(missing)} extra={sorted(extra_names)}"
        )
    for name, tensor in named_params.items():
        shape = tuple(metadata["shapes"][name])
        if shape != tensor.data.shape:
            raise ValueError(
                f"tensor {name!r}: checkpoint shape {shape} vs model shape {tensor.data.shape}"
            )
        raw = (directory / "tensors" / _tensor_file(name)).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensor.data = np.ascontiguousarray(arr, dtype=tensor.data.dtype)
    return metadata


def load_captioner(directory):
    """Rebuild a captioner (including its vocabulary) from a checkpoint."""
    from .captioner import Captioner, CaptionerConfig
    from .dataset import Vocab
    from .numerics import Rng

    metadata = load_metadata(directory)
    if metadata["extra"].get("model_type") != "captioner":
        raise ValueError(f"{directory} is not a captioner checkpoint")
    config = CaptionerConfig.from_dict(metadata["config"]["model"])
    vocab = Vocab(metadata["extra"]["vocab"])
    model = Captioner(config, vocab, Rng(0))
    load_checkpoint_into(directory, dict(model.params()))
    return model, metadata


def load_clap(directory):
    """Rebuild a CLAP dual encoder from a checkpoint."""
    from .clap import ClapConfig, ClapModel
    from .dataset import Vocab
    from .numerics import Rng

    metadata = load_metadata(directory)
    if metadata["extra"].get("model_type") != "clap":
        raise ValueError(f"{directory} is not a clap checkpoint")
    config = ClapConfig.from_dict(metadata["config"]["model"])
    vocab = Vocab(metadata["extra"]["vocab"])
    model = ClapModel(config, vocab, Rng(0))
    load_checkpoint_into(directory, dict(model.params()))
    return model, metadata
