"""Decoding strategies and multi-candidate reranking.

Beam search scores hypotheses by the raw sum of token log-probabilities (no
length normalization); ties break toward the earlier finish, then the
lexicographically smaller token sequence, so results are fully deterministic.
Candidate pools hold one caption per beam size; reranking sorts them by
audio-text cosine similarity, and oracle selection picks the candidate that
maximizes a reference-based metric (the reranking ceiling).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .audio_frontend import AudioClip, FeatureSeq
from .captioner import Captioner
from .clap import ClapModel, cosine_similarity
from .dataset import EOS_ID, decode_tokens
from .ioutil import canonical_dumps
from .numerics import Rng, softmax

log = logging.getLogger(__name__)

DEFAULT_BEAM_SIZES = (2, 3, 4, 5, 6, 7, 8)

Scorer = Callable[[tuple[int, ...]], np.ndarray]


@dataclass
class Candidate:
    caption: str
    beam_size: int
    lm_score: float
    clap_score: float | None = None
    finished: bool = True

    def to_record(self) -> dict:
        return {
            "caption": self.caption,
            "beam_size": self.beam_size,
            "lm_score": self.lm_score,
            "clap_score": self.clap_score,
        }


@dataclass
class CandidateSet:
    audio_id: str
    candidates: list[Candidate]
    chosen: str | None = None
    failures: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"candidate set for {self.audio_id!r} is empty")
        sizes = [c.beam_size for c in self.candidates]
        if len(sizes) != len(set(sizes)):
            raise ValueError(f"duplicate beam sizes in candidate set for {self.audio_id!r}")
        for c in self.candidates:
            if not np.isfinite(c.lm_score):
                raise ValueError(f"non-finite lm_score for {self.audio_id!r}")

    def to_record(self) -> dict:
        return {
            "id": self.audio_id,
            "candidates": [c.to_record() for c in self.candidates],
            "chosen": self.chosen,
        }


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool
    finish_step: int


def beam_search_ids(
    scorer: Scorer,
    eos_id: int,
    beam_size: int,
    max_len: int,
) -> BeamHypothesis:
    """Generic beam search over a next-token log-probability function.

    ``scorer`` maps a generated prefix (token ids, no bos/eos) to a log-prob
    vector over the vocabulary.  Returns the best finished hypothesis, or the
    best live one flagged unfinished if nothing emits eos within ``max_len``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[BeamHypothesis] = []
    for step in range(1, max_len + 1):
        expansions: list[tuple[float, tuple[int, ...], int]] = []
        for score, ids in live:
            logp = scorer(ids)
            for tok in range(len(logp)):
                expansions.append((score + float(logp[tok]), ids, tok))
        # deterministic order: score desc, then prefix, then token id
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        # only the top beam_size expansions survive; eos among them finishes
        next_live = []
        for score, ids, tok in expansions[:beam_size]:
            if tok == eos_id:
                finished.append(
                    BeamHypothesis(ids=ids, score=score, finished=True, finish_step=step)
                )
            else:
                next_live.append((score, ids + (tok,)))
        live = next_live
        if not live:
            break
    if finished:
        finished.sort(key=lambda h: (-h.score, h.finish_step, h.ids))
        return finished[0]
    live.sort(key=lambda e: (-e[0], e[1]))
    score, ids = live[0]
    return BeamHypothesis(ids=ids, score=score, finished=False, finish_step=max_len)


def beam_search(
    model: Captioner,
    e_A: FeatureSeq,
    prompt_ids: np.ndarray | None = None,
    beam_size: int = 4,
    max_len: int = 30,
) -> Candidate:
    """Beam-search a caption for projected audio features."""
    hyp = beam_search_ids(
        model.make_scorer(e_A, prompt_ids), EOS_ID, beam_size, max_len
    )
    caption = decode_tokens(np.array(hyp.ids, dtype=np.int64), model.vocab)
    if not hyp.finished:
        log.warning("beam %d hit max_len=%d without finishing", beam_size, max_len)
    return Candidate(
        caption=caption, beam_size=beam_size, lm_score=hyp.score, finished=hyp.finished
    )


def nucleus_sample_ids(
    scorer: Scorer,
    eos_id: int,
    rng: Rng,
    temperature: float = 0.5,
    top_p: float = 0.95,
    max_len: int = 30,
) -> tuple[list[int], float]:
    """Sample a sequence from the smallest probability mass >= top_p per step.

    Returns the sampled ids and the sum of the model's (untempered) token
    log-probabilities along the way.
    """
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must be in (0, 1]")
    if temperature <= 0.0:
        raise ValueError("temperature must be > 0")
    out: list[int] = []
    lm_score = 0.0
    for _ in range(max_len):
        logp = np.asarray(scorer(tuple(out)))
        probs = softmax(logp / temperature)
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        cutoff = int(np.searchsorted(cum, top_p, side="left"))
        kept = order[: cutoff + 1]
        kept_probs = probs[kept]
        kept_probs = kept_probs / kept_probs.sum()
        pick = int(np.searchsorted(np.cumsum(kept_probs), rng.random(), side="right"))
        tok = int(kept[min(pick, len(kept) - 1)])
        lm_score += float(logp[tok])
        if tok == eos_id:
            break
        out.append(tok)
    return out, lm_score


def nucleus_sample(
    model: Captioner,
    e_A: FeatureSeq,
    rng: Rng,
    prompt_ids: np.ndarray | None = None,
    temperature: float = 0.5,
    top_p: float = 0.95,
    max_len: int = 30,
) -> str:
    ids, _ = nucleus_sample_ids(
        model.make_scorer(e_A, prompt_ids), EOS_ID, rng,
        temperature=temperature, top_p=top_p, max_len=max_len,
    )
    return decode_tokens(np.array(ids, dtype=np.int64), model.vocab)


def generate_candidates(
    model: Captioner,
    clip: AudioClip,
    audio_id: str = "",
    beam_sizes: Sequence[int] = DEFAULT_BEAM_SIZES,
    max_len: int = 30,
) -> CandidateSet:
    """One beam-search caption per beam size (duplicate texts are retained)."""
    e_A = model.project_downsample(model.encode_audio(clip))
    candidates = []
    failures = []
    for n in beam_sizes:
        try:
            candidates.append(beam_search(model, e_A, beam_size=n, max_len=max_len))
        except Exception as exc:  # record and continue with the rest of the pool
            failures.append(f"beam {n}: {exc}")
            log.warning("beam %d failed for %s: %s", n, audio_id, exc)
    if not candidates:
        raise RuntimeError(f"all beam sizes failed for {audio_id!r}: {failures}")
    return CandidateSet(audio_id=audio_id, candidates=candidates, failures=failures)


def rank_by_clap_score(cset: CandidateSet) -> CandidateSet:
    """Sort candidates by similarity, ties to the smaller beam size."""
    scored = [c for c in cset.candidates if c.clap_score is not None]
    if not scored:
        raise ValueError(f"no scored candidates to rank for {cset.audio_id!r}")
    ranked = sorted(scored, key=lambda c: (-c.clap_score, c.beam_size))
    return CandidateSet(
        audio_id=cset.audio_id,
        candidates=ranked,
        chosen=ranked[0].caption,
        failures=list(cset.failures),
    )


def clap_refine(
    cset: CandidateSet,
    clap_model: ClapModel,
    clip: AudioClip,
) -> CandidateSet:
    """Score every candidate against the audio and pick the best-aligned one.

    Candidates whose captions cannot be embedded are dropped (logged), the
    rest are sorted by descending similarity.
    """
    audio_emb = clap_model.embed_audio(clip)
    scored = []
    failures = list(cset.failures)
    for cand in cset.candidates:
        try:
            text_emb = clap_model.embed_text(cand.caption)
        except Exception as exc:
            failures.append(f"beam {cand.beam_size}: embedding failed ({exc})")
            log.warning(
                "dropping candidate (beam %d) for %s: %s", cand.beam_size, cset.audio_id, exc
            )
            continue
        scored.append(
            Candidate(
                caption=cand.caption,
                beam_size=cand.beam_size,
                lm_score=cand.lm_score,
                clap_score=cosine_similarity(audio_emb, text_emb),
                finished=cand.finished,
            )
        )
    if not scored:
        raise RuntimeError(f"every candidate failed to embed for {cset.audio_id!r}")
    return rank_by_clap_score(
        CandidateSet(audio_id=cset.audio_id, candidates=scored, failures=failures)
    )


def oracle_select(
    cset: CandidateSet,
    references: Sequence[str],
    metric: Callable[[str, Sequence[str]], float],
) -> Candidate:
    """The candidate maximizing a reference-based metric: the reranking ceiling."""
    best = None
    best_score = -np.inf
    for cand in cset.candidates:
        score = float(metric(cand.caption, references))
        if score > best_score or (
            score == best_score and best is not None and cand.beam_size < best.beam_size
        ):
            best, best_score = cand, score
    return best


# ---- candidate dump I/O ------------------------------------------------------------


def dump_candidate_sets(sets: Sequence[CandidateSet]) -> str:
    return "".join(canonical_dumps(s.to_record()) + "\n" for s in sets)


def load_candidate_sets(path) -> list[CandidateSet]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            candidates = [
                Candidate(
                    caption=c["caption"],
                    beam_size=int(c["beam_size"]),
                    lm_score=float(c["lm_score"]),
                    clap_score=None if c.get("clap_score") is None else float(c["clap_score"]),
                )
                for c in record["candidates"]
            ]
            out.append(
                CandidateSet(
                    audio_id=record["id"], candidates=candidates, chosen=record.get("chosen")
                )
            )
    return out
