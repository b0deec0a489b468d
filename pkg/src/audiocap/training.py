"""Optimizer, learning-rate schedules, and the two training loops.

Both loops are deterministic given the config seed: parameter init, batch
order, and any mel masking all derive from one seeded stream.  Validation runs
on a fixed cadence and the checkpoint with the lowest validation loss wins.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_frontend import read_wav, spec_augment
from .captioner import Captioner
from .checkpoint import save_checkpoint
from .clap import ClapModel, infonce_loss
from .dataset import Manifest, TokenSeq, encode_caption, resolve_audio_path
from .ioutil import atomic_write_text, canonical_dumps
from .numerics import Rng, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 16
    peak_lr: float = 1e-3
    total_updates: int = 1500
    warmup: int = 100
    schedule: str = "linear"
    validate_every: int = 250
    seed: int = 0
    # epoch-based fields used by the cosine schedule / CLAP loop
    warmup_epochs: int = 2
    total_epochs: int = 15
    # optional mel masking during captioner training
    use_spec_augment: bool = False
    sa_time_masks: int = 2
    sa_max_t: int = 8
    sa_freq_masks: int = 2
    sa_max_f: int = 16

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "linear" and self.warmup > self.total_updates:
            raise ValueError("warmup must be <= total_updates")

    def to_dict(self) -> dict:
        return asdict(self)


class OptimizerState:
    """Per-tensor first/second moment buffers for bias-corrected Adam."""

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(named_params: list[tuple[str, Tensor]], state: OptimizerState, lr: float) -> None:
    """One bias-corrected adaptive update over the given (trainable) tensors.

    Tensors without an accumulated gradient are treated as zero-gradient.
    Anything not passed in (the frozen partition) is untouched by construction.
    """
    state.step += 1
    t = state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_linear(step: int, warmup: int = 1000, peak: float = 1e-4, total: int = 100_000) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > total:
        raise ValueError("warmup must be <= total")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak if step == warmup else 0.0
    return peak * (total - step) / (total - warmup)


def lr_cosine(
    step: int,
    warmup_epochs: int = 2,
    peak: float = 5e-5,
    total_epochs: int = 15,
    steps_per_epoch: int = 100,
) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine annealing to 0."""
    warmup_steps = warmup_epochs * steps_per_epoch
    total_steps = total_epochs * steps_per_epoch
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError("warmup must be <= total")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak if step == warmup_steps else 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    best_dir: Path
    best_step: int
    best_valid_loss: float
    log: list[dict] = field(default_factory=list)


def _zero_all_grads(model) -> None:
    for _, p in model.params():
        p.zero_grad()


def _scale_grads(named_params, factor: float) -> None:
    for _, p in named_params:
        if p.grad is not None:
            p.grad *= factor


def _write_log(out_dir: Path, log: list[dict]) -> None:
    atomic_write_text(
        out_dir / "train_log.jsonl",
        "".join(canonical_dumps(rec) + "\n" for rec in log),
    )


def caption_examples(
    manifest: Manifest, manifest_path, model: Captioner, split: str
) -> list[tuple[str, "np.ndarray", TokenSeq]]:
    """(entry id, mel frames, token seq) pairs for a split, one per caption."""
    from .audio_frontend import log_mel

    out = []
    for entry in manifest.split(split):
        clip = read_wav(resolve_audio_path(manifest_path, entry))
        mel = log_mel(clip)
        for caption in entry.captions:
            out.append((entry.id, mel, encode_caption(caption, model.vocab)))
    return out


def train_captioner(
    model: Captioner,
    manifest: Manifest,
    manifest_path,
    config: TrainConfig,
    out_dir,
) -> TrainResult:
    """Teacher-forced training of the trainable partition with linear decay.

    Returns the checkpoint with the lowest validation loss; one JSON log
    record per validation is written alongside it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.seed).child("train_captioner")
    batch_rng = rng.child("batches")
    mask_rng = rng.child("spec_augment")

    train = caption_examples(manifest, manifest_path, model, "train")
    valid = caption_examples(manifest, manifest_path, model, "valid")
    if not train:
        raise ValueError("train split has no caption pairs")
    if not valid:
        raise ValueError("valid split has no caption pairs")

    # encoder is frozen, so features can be computed once unless masking is on
    feature_cache = {}
    if not config.use_spec_augment:
        seen = {}
        for entry_id, mel, _ in train:
            if entry_id not in seen:
                seen[entry_id] = model.encode_mel(mel)
        feature_cache = seen
    valid_features = {}
    for entry_id, mel, _ in valid:
        if entry_id not in valid_features:
            valid_features[entry_id] = model.encode_mel(mel)

    def features_for(entry_id: str, mel):
        if config.use_spec_augment:
            masked = spec_augment(
                mel, mask_rng,
                n_time_masks=config.sa_time_masks, max_t=config.sa_max_t,
                n_freq_masks=config.sa_freq_masks, max_f=config.sa_max_f,
            )
            return model.encode_mel(masked)
        return feature_cache[entry_id]

    def validation_loss() -> float:
        losses = [
            model.loss_from_features(valid_features[eid], target)
            for eid, _, target in valid
        ]
        return float(np.mean(losses))

    trainable = model.trainable_params()
    opt = OptimizerState()
    order = batch_rng.permutation(len(train))
    cursor = 0
    log: list[dict] = []
    best_loss = math.inf
    best_step = -1
    best_dir = out_dir / "best"
    window_losses: list[float] = []

    def save_best(step: int, valid_loss: float) -> None:
        save_checkpoint(
            best_dir,
            dict(model.params()),
            config={"model": model.config.to_dict(), "train": config.to_dict()},
            step=step,
            valid_loss=valid_loss,
            extra={"vocab": model.vocab.words, "model_type": "captioner"},
        )

    for update in range(1, config.total_updates + 1):
        if config.schedule == "linear":
            lr = lr_linear(update, config.warmup, config.peak_lr, config.total_updates)
        else:
            steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
            lr = lr_cosine(
                update, config.warmup_epochs, config.peak_lr,
                config.total_epochs, steps_per_epoch,
            )
        _zero_all_grads(model)
        batch_losses = []
        for _ in range(config.batch_size):
            if cursor >= len(order):
                order = batch_rng.permutation(len(train))
                cursor = 0
            entry_id, mel, target = train[int(order[cursor])]
            cursor += 1
            batch_losses.append(
                model.loss_from_features(features_for(entry_id, mel), target, backward=True)
            )
        _scale_grads(trainable, 1.0 / config.batch_size)
        adam_step(trainable, opt, lr)
        window_losses.extend(batch_losses)

        if update % config.validate_every == 0 or update == config.total_updates:
            valid_loss = validation_loss()
            record = {
                "step": update,
                "train_loss": float(np.mean(window_losses)),
                "valid_loss": valid_loss,
                "lr": lr,
            }
            log.append(record)
            window_losses = []
            if valid_loss < best_loss:
                best_loss = valid_loss
                best_step = update
                save_best(update, valid_loss)

    _write_log(out_dir, log)
    return TrainResult(best_dir=best_dir, best_step=best_step, best_valid_loss=best_loss, log=log)


def clap_examples(manifest: Manifest, manifest_path, model: ClapModel, split: str):
    from .audio_frontend import log_mel

    out = []
    for entry in manifest.split(split):
        clip = read_wav(resolve_audio_path(manifest_path, entry))
        mel = log_mel(clip)
        for caption in entry.captions:
            out.append((mel, encode_caption(caption, model.vocab)))
    return out


def train_clap(
    model: ClapModel,
    manifest: Manifest,
    manifest_path,
    config: TrainConfig,
    out_dir,
) -> TrainResult:
    """Contrastive training of the dual encoder, cosine schedule, epoch loop.

    Validation (and best-checkpoint selection) happens at every epoch end.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.seed).child("train_clap")
    batch_rng = rng.child("batches")

    if config.batch_size < 2:
        raise ValueError("contrastive batches need at least 2 pairs")
    train = clap_examples(manifest, manifest_path, model, "train")
    valid = clap_examples(manifest, manifest_path, model, "valid")
    if len(train) < 2:
        raise ValueError("contrastive training needs at least 2 train pairs")
    if len(valid) < 2:
        raise ValueError("contrastive validation needs at least 2 valid pairs")

    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    trainable = model.trainable_params()
    opt = OptimizerState()
    log: list[dict] = []
    best_loss = math.inf
    best_step = -1
    best_dir = out_dir / "best"

    def run_batch(batch, backward: bool) -> float:
        audio_vecs, text_vecs, audio_ctxs, text_ctxs = [], [], [], []
        for mel, seq in batch:
            ca = {} if backward else None
            ct = {} if backward else None
            audio_vecs.append(model._audio_forward(mel, ca))
            text_vecs.append(model._text_forward(seq.ids, ct))
            audio_ctxs.append(ca)
            text_ctxs.append(ct)
        grads: dict | None = {} if backward else None
        temp = float(model.temperature.data[0])
        loss = infonce_loss(audio_vecs, text_vecs, temp, grads)
        if backward:
            for dvec, ctx in zip(grads["d_audio"], audio_ctxs):
                model._audio_backward(dvec, ctx)
            for dvec, ctx in zip(grads["d_text"], text_ctxs):
                model._text_backward(dvec, ctx)
            model.temperature.accumulate_grad(np.array([grads["d_temperature"]]))
        return loss

    def validation_loss() -> float:
        size = min(config.batch_size, len(valid))
        losses = []
        for start in range(0, len(valid) - 1, size):
            batch = valid[start : start + size]
            if len(batch) < 2:
                batch = valid[-2:]
            losses.append(run_batch(batch, backward=False))
        return float(np.mean(losses))

    def save_best(step: int, valid_loss: float) -> None:
        save_checkpoint(
            best_dir,
            dict(model.params()),
            config={"model": model.config.to_dict(), "train": config.to_dict()},
            step=step,
            valid_loss=valid_loss,
            extra={"vocab": model.vocab.words, "model_type": "clap"},
        )

    update = 0
    for _ in range(config.total_epochs):
        order = batch_rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(train), config.batch_size):
            batch = [train[int(i)] for i in order[start : start + config.batch_size]]
            if len(batch) < 2:
                continue
            update += 1
            lr = lr_cosine(
                min(update, config.total_epochs * steps_per_epoch),
                config.warmup_epochs, config.peak_lr,
                config.total_epochs, steps_per_epoch,
            )
            _zero_all_grads(model)
            epoch_losses.append(run_batch(batch, backward=True))
            adam_step(trainable, opt, lr)
            model.clamp_temperature()
        valid_loss = validation_loss()
        log.append(
            {
                "step": update,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                "valid_loss": valid_loss,
                "lr": lr,
            }
        )
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_step = update
            save_best(update, valid_loss)

    _write_log(out_dir, log)
    return TrainResult(best_dir=best_dir, best_step=best_step, best_valid_loss=best_loss, log=log)
