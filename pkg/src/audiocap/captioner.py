"""The captioning model: audio encoder, 5x downsampling projector, decoder LM.

The decoder attends to a joint sequence of projected audio rows, prompt token
rows, and (during training) teacher-forced caption rows.  Audio and prompt
rows form a bidirectional prefix; caption rows attend causally among
themselves, so inference (which has no caption rows yet) produces exactly the
same logits as training for any shared prefix.  Only the projector, the LoRA
adapters on the decoder's q/v projections, and optionally the output head are
trainable; the encoder and decoder backbones stay frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from .audio_frontend import AudioClip, FeatureSeq, MelSpectrogram, PatchEmbed, log_mel
from .dataset import BOS_ID, EOS_ID, TokenSeq, Vocab
from .layers import (
    Embedding,
    Linear,
    TransformerStack,
    prefix_lm_mask,
    sinusoid_positions,
)
from .numerics import Rng, Tensor, cross_entropy_from_logits, gelu, gelu_backward, log_softmax
from .text import word_tokenize


@dataclass
class CaptionerConfig:
    vocab_size: int
    enc_dim: int = 24
    enc_layers: int = 1
    enc_heads: int = 2
    enc_ff: int = 48
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ff: int = 128
    proj_hidden: int = 128
    downsample: int = 5
    lora_rank: int = 8
    lora_alpha: float = 16.0
    train_head: bool = True
    prompt: str = "Describe the audio you hear"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionerConfig":
        return cls(**d)


@dataclass
class JointEmbedding:
    """Concatenated decoder input rows with the region boundaries recorded."""

    rows: np.ndarray
    audio_len: int
    prompt_len: int
    target_len: int

    @property
    def prefix_len(self) -> int:
        return self.audio_len + self.prompt_len

    @property
    def boundaries(self) -> tuple[int, int]:
        return (self.audio_len, self.audio_len + self.prompt_len)

    @property
    def total(self) -> int:
        return self.rows.shape[0]


class Captioner:
    def __init__(self, config: CaptionerConfig, vocab: Vocab, rng: Rng):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"vocab size {len(vocab)} does not match config.vocab_size {config.vocab_size}"
            )
        if not config.prompt.strip():
            raise ValueError("prompt must be non-empty")
        self.config = config
        self.vocab = vocab
        self.patch_embed = PatchEmbed(config.enc_dim, rng.child("patch_embed"))
        self.encoder = TransformerStack(
            config.enc_layers, config.enc_dim, config.enc_heads, config.enc_ff,
            rng.child("encoder"),
        )
        self.proj1 = Linear(
            config.downsample * config.enc_dim, config.proj_hidden, rng.child("proj1")
        )
        self.proj2 = Linear(config.proj_hidden, config.dec_dim, rng.child("proj2"))
        self.tok_embed = Embedding(config.vocab_size, config.dec_dim, rng.child("tok_embed"))
        self.decoder = TransformerStack(
            config.dec_layers, config.dec_dim, config.dec_heads, config.dec_ff,
            rng.child("decoder"),
            lora_rank=config.lora_rank, lora_alpha=config.lora_alpha,
        )
        self.head = Linear(config.dec_dim, config.vocab_size, rng.child("head"))
        self.prompt_ids = np.array(
            [vocab.id_of(t) for t in word_tokenize(config.prompt)], dtype=np.int64
        )
        if len(self.prompt_ids) == 0:
            raise ValueError("prompt tokenized to nothing")

    # ---- parameter partition -------------------------------------------------

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.patch_embed.params():
            yield f"patch_embed.{n}", p
        for n, p in self.encoder.params():
            yield f"encoder.{n}", p
        for n, p in self.proj1.params():
            yield f"proj1.{n}", p
        for n, p in self.proj2.params():
            yield f"proj2.{n}", p
        for n, p in self.tok_embed.params():
            yield f"tok_embed.{n}", p
        for n, p in self.decoder.params():
            yield f"decoder.{n}", p
        for n, p in self.head.params():
            yield f"head.{n}", p

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        out = [(f"proj1.{n}", p) for n, p in self.proj1.params()]
        out += [(f"proj2.{n}", p) for n, p in self.proj2.params()]
        out += [(f"decoder.{n}", p) for n, p in self.decoder.lora_params()]
        if self.config.train_head:
            out += [(f"head.{n}", p) for n, p in self.head.params()]
        return out

    def frozen_params(self) -> list[tuple[str, Tensor]]:
        trainable = {name for name, _ in self.trainable_params()}
        return [(n, p) for n, p in self.params() if n not in trainable]

    # ---- forward pieces --------------------------------------------------------

    def encode_mel(self, mel: MelSpectrogram, ctx: dict | None = None) -> FeatureSeq:
        c_patch = {} if ctx is not None else None
        c_enc = {} if ctx is not None else None
        patches = self.patch_embed.forward(mel, c_patch)
        h = patches
        if self.encoder.blocks:  # a zero-layer encoder is exactly the patchifier
            h = h + sinusoid_positions(h.shape[0], self.config.enc_dim)
        encoded = self.encoder.forward(h, None, c_enc)
        if ctx is not None:
            ctx.update(c_patch=c_patch, c_enc=c_enc)
        return FeatureSeq(frames=encoded, nominal_rate=50.0)

    def encode_audio(self, clip: AudioClip, ctx: dict | None = None) -> FeatureSeq:
        return self.encode_mel(log_mel(clip), ctx)

    def project_downsample(self, e_a: FeatureSeq, ctx: dict | None = None) -> FeatureSeq:
        """Zero-pad to a multiple of the stride, concat each group of 5 frames,
        then project through linear-GELU-linear to decoder width (~10 Hz out)."""
        stride = self.config.downsample
        frames = e_a.frames
        t = frames.shape[0]
        t_out = -(-t // stride)  # ceil
        padded = np.zeros((t_out * stride, frames.shape[1]))
        padded[:t] = frames
        grouped = padded.reshape(t_out, stride * frames.shape[1])
        c1 = {} if ctx is not None else None
        c2 = {} if ctx is not None else None
        h = self.proj1.forward(grouped, c1)
        a = gelu(h)
        out = self.proj2.forward(a, c2)
        if ctx is not None:
            ctx.update(c1=c1, c2=c2, h=h, t_in=t, d_in=frames.shape[1])
        return FeatureSeq(frames=out, nominal_rate=e_a.nominal_rate / stride)

    def _project_backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        da = self.proj2.backward(dy, ctx["c2"])
        dh = gelu_backward(ctx["h"], da)
        dgrouped = self.proj1.backward(dh, ctx["c1"])
        stride = self.config.downsample
        dpadded = dgrouped.reshape(-1, ctx["d_in"])
        return dpadded[: ctx["t_in"]]

    def assemble_joint(
        self,
        e_A: FeatureSeq,
        prompt_ids: np.ndarray | None = None,
        target: TokenSeq | None = None,
        mode: str = "infer",
        ctx: dict | None = None,
    ) -> JointEmbedding:
        """Stack [audio rows; prompt rows] plus, in train mode, the
        teacher-forced caption rows (everything up to but excluding eos)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "infer" and target is not None:
            raise ValueError("target tokens are not allowed in infer mode")
        if mode == "train" and target is None:
            raise ValueError("train mode requires target tokens")
        if prompt_ids is None:
            prompt_ids = self.prompt_ids
        if len(prompt_ids) == 0:
            raise ValueError("prompt must be non-empty")

        c_prompt = {} if ctx is not None else None
        prompt_rows = self.tok_embed.forward(prompt_ids, c_prompt)
        pieces = [e_A.frames, prompt_rows]
        target_len = 0
        c_target = None
        if target is not None:
            target_input = target.ids[:-1]  # bos + caption words; labels are ids[1:]
            c_target = {} if ctx is not None else None
            pieces.append(self.tok_embed.forward(target_input, c_target))
            target_len = len(target_input)
        rows = np.concatenate(pieces, axis=0)
        rows = rows + sinusoid_positions(rows.shape[0], self.config.dec_dim)
        if ctx is not None:
            ctx.update(c_prompt=c_prompt, c_target=c_target)
        return JointEmbedding(
            rows=rows,
            audio_len=e_A.frames.shape[0],
            prompt_len=len(prompt_ids),
            target_len=target_len,
        )

    def decoder_hidden(self, joint: JointEmbedding, ctx: dict | None = None) -> np.ndarray:
        mask = prefix_lm_mask(joint.total, joint.prefix_len)
        return self.decoder.forward(joint.rows, mask, ctx)

    def caption_loss(
        self,
        joint: JointEmbedding,
        target: TokenSeq,
        backward_ctx: dict | None = None,
    ) -> float:
        """Mean next-token cross entropy over the caption rows (teacher forcing).

        When ``backward_ctx`` is given the decoder/head contexts are stored
        there along with the logits gradient, for the caller to backpropagate.
        """
        if joint.target_len == 0:
            raise ValueError("caption_loss needs a train-mode joint embedding")
        labels = target.ids[1:]
        if len(labels) != joint.target_len:
            raise ValueError(
                f"target length {len(labels)} does not match joint target rows {joint.target_len}"
            )
        c_dec = {} if backward_ctx is not None else None
        c_head = {} if backward_ctx is not None else None
        hidden = self.decoder_hidden(joint, c_dec)
        target_hidden = hidden[joint.prefix_len :]
        logits = self.head.forward(target_hidden, c_head)
        loss, dlogits = cross_entropy_from_logits(logits, labels)
        if backward_ctx is not None:
            backward_ctx.update(c_dec=c_dec, c_head=c_head, dlogits=dlogits, joint=joint)
        return loss

    # ---- end-to-end loss with gradients ------------------------------------------

    def loss_from_features(
        self, e_a: FeatureSeq, target: TokenSeq, backward: bool = False
    ) -> float:
        """Loss starting from frozen encoder output; backward reaches the
        projector, LoRA, and head (the trainable partition)."""
        ctx_proj = {} if backward else None
        e_A = self.project_downsample(e_a, ctx_proj)
        ctx_joint = {} if backward else None
        joint = self.assemble_joint(e_A, target=target, mode="train", ctx=ctx_joint)
        ctx_loss = {} if backward else None
        loss = self.caption_loss(joint, target, ctx_loss)
        if backward:
            self._backward_from_loss(ctx_loss, ctx_joint, ctx_proj)
        return loss

    def loss_from_clip(self, clip: AudioClip, target: TokenSeq, backward: bool = False) -> float:
        """Full-path loss including the encoder, for gradient checking."""
        return self.loss_from_mel(log_mel(clip), target, backward=backward)

    def loss_from_mel(self, mel: MelSpectrogram, target: TokenSeq, backward: bool = False) -> float:
        ctx_enc = {} if backward else None
        e_a = self.encode_mel(mel, ctx_enc)
        ctx_proj = {} if backward else None
        e_A = self.project_downsample(e_a, ctx_proj)
        ctx_joint = {} if backward else None
        joint = self.assemble_joint(e_A, target=target, mode="train", ctx=ctx_joint)
        ctx_loss = {} if backward else None
        loss = self.caption_loss(joint, target, ctx_loss)
        if backward:
            d_ea = self._backward_from_loss(ctx_loss, ctx_joint, ctx_proj)
            d_enc_in = self.encoder.backward(d_ea, ctx_enc["c_enc"])
            self.patch_embed.backward(d_enc_in, ctx_enc["c_patch"])
        return loss

    def _backward_from_loss(self, ctx_loss: dict, ctx_joint: dict, ctx_proj: dict) -> np.ndarray:
        joint: JointEmbedding = ctx_loss["joint"]
        d_target_hidden = self.head.backward(ctx_loss["dlogits"], ctx_loss["c_head"])
        d_hidden = np.zeros((joint.total, self.config.dec_dim))
        d_hidden[joint.prefix_len :] = d_target_hidden
        d_rows = self.decoder.backward(d_hidden, ctx_loss["c_dec"])
        # positions are additive constants; gradient passes straight through
        d_audio = d_rows[: joint.audio_len]
        d_prompt = d_rows[joint.audio_len : joint.prefix_len]
        self.tok_embed.backward(d_prompt, ctx_joint["c_prompt"])
        if ctx_joint["c_target"] is not None:
            self.tok_embed.backward(d_rows[joint.prefix_len :], ctx_joint["c_target"])
        return self._project_backward(d_audio, ctx_proj)

    # ---- inference ---------------------------------------------------------------

    def make_scorer(
        self, e_A: FeatureSeq, prompt_ids: np.ndarray | None = None
    ) -> Callable[[tuple[int, ...]], np.ndarray]:
        """Next-token log-probability function over generated prefixes.

        The prefix excludes bos; a bos row is prepended internally so that the
        first generated token is predicted from the same layout as training.
        """
        if prompt_ids is None:
            prompt_ids = self.prompt_ids

        def score(prefix: tuple[int, ...]) -> np.ndarray:
            target_input = np.array([BOS_ID] + list(prefix), dtype=np.int64)
            joint_rows = np.concatenate(
                [
                    e_A.frames,
                    self.tok_embed.forward(prompt_ids),
                    self.tok_embed.forward(target_input),
                ],
                axis=0,
            )
            joint_rows = joint_rows + sinusoid_positions(joint_rows.shape[0], self.config.dec_dim)
            joint = JointEmbedding(
                rows=joint_rows,
                audio_len=e_A.frames.shape[0],
                prompt_len=len(prompt_ids),
                target_len=len(target_input),
            )
            hidden = self.decoder_hidden(joint)
            logits = self.head.forward(hidden[-1:])[0]
            return log_softmax(logits)

        return score

    def greedy_decode(self, e_A: FeatureSeq, max_len: int = 30) -> list[int]:
        """Argmax decoding until eos; returns generated ids without bos/eos."""
        scorer = self.make_scorer(e_A)
        out: list[int] = []
        for _ in range(max_len):
            nxt = int(np.argmax(scorer(tuple(out))))
            if nxt == EOS_ID:
                break
            out.append(nxt)
        return out
