"""Toy dual-encoder mapping audio and captions into one similarity space.

Both branches are small transformers (the audio one rides on the shared mel
frontend) followed by mean pooling and a linear projection.  Training uses a
symmetric InfoNCE objective over in-batch pairs with a learnable temperature,
so cosine similarity between an audio clip and a caption measures how well
they match; that similarity score is what drives candidate reranking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .audio_frontend import AudioClip, MelSpectrogram, PatchEmbed, log_mel
from .dataset import TokenSeq, Vocab, encode_caption
from .layers import Embedding, Linear, TransformerStack, sinusoid_positions
from .numerics import Rng, Tensor, log_softmax, softmax

TEMP_INIT = 0.07
TEMP_MIN = 1e-3
TEMP_MAX = 1.0
NORM_EPS = 1e-12


@dataclass
class ClapConfig:
    vocab_size: int
    d_model: int = 32
    d_clap: int = 24
    audio_layers: int = 1
    text_layers: int = 1
    n_heads: int = 2
    d_ff: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClapConfig":
        return cls(**d)


@dataclass
class ClapEmbedding:
    vector: np.ndarray
    modality: str  # "audio" | "text"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite values")


def cosine_similarity(c_a, c_t) -> float:
    """cos(a, t) = a.t / (|a| |t|); symmetric and invariant to positive scaling."""
    a = np.asarray(c_a.vector if isinstance(c_a, ClapEmbedding) else c_a, dtype=np.float64)
    t = np.asarray(c_t.vector if isinstance(c_t, ClapEmbedding) else c_t, dtype=np.float64)
    na, nt = np.linalg.norm(a), np.linalg.norm(t)
    if na == 0.0 or nt == 0.0:
        raise ValueError("cosine_similarity: zero-norm vector")
    return float(np.dot(a, t) / (na * nt))


class ClapModel:
    def __init__(self, config: ClapConfig, vocab: Vocab, rng: Rng):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"vocab size {len(vocab)} does not match config.vocab_size {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.patch_embed = PatchEmbed(config.d_model, rng.child("patch_embed"))
        self.audio_encoder = TransformerStack(
            config.audio_layers, config.d_model, config.n_heads, config.d_ff,
            rng.child("audio_encoder"),
        )
        self.audio_proj = Linear(config.d_model, config.d_clap, rng.child("audio_proj"))
        self.tok_embed = Embedding(config.vocab_size, config.d_model, rng.child("tok_embed"))
        self.text_encoder = TransformerStack(
            config.text_layers, config.d_model, config.n_heads, config.d_ff,
            rng.child("text_encoder"),
        )
        self.text_proj = Linear(config.d_model, config.d_clap, rng.child("text_proj"))
        # loss details are a default choice, not a claim about the reference setup
        self.temperature = Tensor(np.array([TEMP_INIT]), requires_grad=True)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.patch_embed.params():
            yield f"patch_embed.{n}", p
        for n, p in self.audio_encoder.params():
            yield f"audio_encoder.{n}", p
        for n, p in self.audio_proj.params():
            yield f"audio_proj.{n}", p
        for n, p in self.tok_embed.params():
            yield f"tok_embed.{n}", p
        for n, p in self.text_encoder.params():
            yield f"text_encoder.{n}", p
        for n, p in self.text_proj.params():
            yield f"text_proj.{n}", p
        yield "temperature", self.temperature

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return list(self.params())

    def clamp_temperature(self) -> None:
        np.clip(self.temperature.data, TEMP_MIN, TEMP_MAX, out=self.temperature.data)

    # ---- audio branch ------------------------------------------------------------

    def _audio_forward(self, mel: MelSpectrogram, ctx: dict | None = None) -> np.ndarray:
        c_patch = {} if ctx is not None else None
        c_enc = {} if ctx is not None else None
        c_proj = {} if ctx is not None else None
        patches = self.patch_embed.forward(mel, c_patch)
        t = patches.shape[0]
        h = self.audio_encoder.forward(
            patches + sinusoid_positions(t, self.config.d_model), None, c_enc
        )
        pooled = h.mean(axis=0, keepdims=True)
        vec = self.audio_proj.forward(pooled, c_proj)[0]
        if ctx is not None:
            ctx.update(c_patch=c_patch, c_enc=c_enc, c_proj=c_proj, t=t)
        return self._guard(vec)

    def _audio_backward(self, dvec: np.ndarray, ctx: dict) -> None:
        dpooled = self.audio_proj.backward(dvec[None, :], ctx["c_proj"])
        dh = np.repeat(dpooled, ctx["t"], axis=0) / ctx["t"]
        dpatches = self.audio_encoder.backward(dh, ctx["c_enc"])
        self.patch_embed.backward(dpatches, ctx["c_patch"])

    def embed_mel(self, mel: MelSpectrogram, ctx: dict | None = None) -> ClapEmbedding:
        return ClapEmbedding(vector=self._audio_forward(mel, ctx), modality="audio")

    def embed_audio(self, clip: AudioClip) -> ClapEmbedding:
        return self.embed_mel(log_mel(clip))

    # ---- text branch -------------------------------------------------------------

    def _text_forward(self, ids: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        c_emb = {} if ctx is not None else None
        c_enc = {} if ctx is not None else None
        c_proj = {} if ctx is not None else None
        rows = self.tok_embed.forward(ids, c_emb)
        t = rows.shape[0]
        h = self.text_encoder.forward(
            rows + sinusoid_positions(t, self.config.d_model), None, c_enc
        )
        pooled = h.mean(axis=0, keepdims=True)
        vec = self.text_proj.forward(pooled, c_proj)[0]
        if ctx is not None:
            ctx.update(c_emb=c_emb, c_enc=c_enc, c_proj=c_proj, t=t)
        return self._guard(vec)

    def _text_backward(self, dvec: np.ndarray, ctx: dict) -> None:
        dpooled = self.text_proj.backward(dvec[None, :], ctx["c_proj"])
        dh = np.repeat(dpooled, ctx["t"], axis=0) / ctx["t"]
        drows = self.text_encoder.backward(dh, ctx["c_enc"])
        self.tok_embed.backward(drows, ctx["c_emb"])

    def embed_text(self, caption: str) -> ClapEmbedding:
        seq = encode_caption(caption, self.vocab)
        if len(seq) <= 2:
            raise ValueError("cannot embed an empty caption")
        return ClapEmbedding(vector=self._text_forward(seq.ids), modality="text")

    def embed_tokens(self, seq: TokenSeq, ctx: dict | None = None) -> ClapEmbedding:
        return ClapEmbedding(vector=self._text_forward(seq.ids, ctx), modality="text")

    @staticmethod
    def _guard(vec: np.ndarray) -> np.ndarray:
        # zero-norm outputs would poison every cosine downstream
        if np.linalg.norm(vec) < NORM_EPS:
            vec = vec.copy()
            vec[0] += NORM_EPS
        return vec

    def similarity(self, clip: AudioClip, caption: str) -> float:
        return cosine_similarity(self.embed_audio(clip), self.embed_text(caption))


def infonce_loss(
    batch_audio: list[np.ndarray],
    batch_text: list[np.ndarray],
    temperature: float,
    grads: dict | None = None,
) -> float:
    """Symmetric InfoNCE over the batch's cosine similarity matrix.

    Row i of the matrix holds cos(audio_i, text_j) / temperature; the loss
    averages cross entropy against the diagonal in both directions.  When
    ``grads`` is supplied it receives ``d_audio``, ``d_text`` (lists of
    per-vector gradients) and ``d_temperature``.
    """
    n = len(batch_audio)
    if n < 2 or len(batch_text) != n:
        raise ValueError(f"need equal batch sizes >= 2, got {n} audio / {len(batch_text)} text")
    a = np.stack([np.asarray(v, dtype=np.float64) for v in batch_audio])
    t = np.stack([np.asarray(v, dtype=np.float64) for v in batch_text])
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nt == 0.0):
        raise ValueError("infonce_loss: zero-norm embedding")
    ah, th = a / na, t / nt
    cos = ah @ th.T
    logits = cos / temperature

    labels = np.arange(n)
    logp_a2t = log_softmax(logits, axis=-1)
    logp_t2a = log_softmax(logits.T, axis=-1)
    loss = -0.5 * float(
        np.mean(logp_a2t[labels, labels]) + np.mean(logp_t2a[labels, labels])
    )

    if grads is not None:
        p_a2t = softmax(logits, axis=-1)
        p_t2a = softmax(logits.T, axis=-1)
        dlogits = np.zeros_like(logits)
        d = p_a2t.copy()
        d[labels, labels] -= 1.0
        dlogits += 0.5 * d / n
        d = p_t2a.copy()
        d[labels, labels] -= 1.0
        dlogits += 0.5 * d.T / n
        dcos = dlogits / temperature
        d_temp = float(np.sum(dlogits * (-cos / temperature**2)))
        dah = dcos @ th
        dth = dcos.T @ ah
        # through L2 normalization: d a = (I - ah ah^T) / |a| . d ah
        da = (dah - ah * np.sum(dah * ah, axis=1, keepdims=True)) / na
        dt = (dth - th * np.sum(dth * th, axis=1, keepdims=True)) / nt
        grads["d_audio"] = [da[i] for i in range(n)]
        grads["d_text"] = [dt[i] for i in range(n)]
        grads["d_temperature"] = d_temp
    return loss
