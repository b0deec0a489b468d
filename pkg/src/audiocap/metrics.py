"""Caption evaluation metrics with pluggable semantic providers.

CIDEr-D follows the consensus formulation: TF-IDF n-gram vectors (n = 1..4)
with document frequencies over the whole corpus's references, count clipping,
and a Gaussian length penalty (sigma = 6).  METEOR here is a reduced variant,
exact plus suffix-stem unigram matching without synonym lookup, so its numbers
are not comparable to published METEOR scores.  SPICE needs a semantic-graph
parser and is a provider interface only; without a provider SPIDEr runs in an
explicitly flagged degraded mode (CIDEr-only).  Fluency gating uses a fixed
deterministic heuristic in place of a trained error detector.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .clap import cosine_similarity
from .text import word_tokenize

CIDER_N = 4
CIDER_SIGMA = 6.0
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
FLUENCY_THRESHOLD = 0.9
FLUENCY_PENALTY = 0.1


def tokenize_ptb_lite(text: str) -> list[str]:
    """Metric tokenizer: same normalization the dataset vocabulary uses."""
    return word_tokenize(text)


# ---- provider contracts -----------------------------------------------------------


class SpiceProvider(Protocol):
    def __call__(self, candidate: str, references: Sequence[str]) -> float: ...


class FluencyProvider(Protocol):
    def __call__(self, caption: str) -> float: ...


class SentenceEmbedder(Protocol):
    def __call__(self, caption: str) -> np.ndarray: ...


@dataclass
class CorpusItem:
    id: str
    candidate: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"item {self.id!r} has no references")


# ---- CIDEr-D ----------------------------------------------------------------------


def _ngram_counts(tokens: Sequence[str], n_max: int = CIDER_N) -> Counter:
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def _tfidf_vector(
    counts: Counter, doc_freq: Counter, log_num_items: float, n_max: int
) -> tuple[list[dict], list[float], int]:
    vec = [dict() for _ in range(n_max)]
    norm = [0.0] * n_max
    length = 0
    for ngram, tf in counts.items():
        idf = log_num_items - math.log(max(1.0, doc_freq[ngram]))
        n = len(ngram) - 1
        vec[n][ngram] = tf * idf
        norm[n] += vec[n][ngram] ** 2
        if n == 0:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def _clipped_similarity(
    vec_h, norm_h, len_h, vec_r, norm_r, len_r, n_max: int, sigma: float
) -> np.ndarray:
    delta = float(len_h - len_r)
    val = np.zeros(n_max)
    for n in range(n_max):
        acc = 0.0
        for ngram, h in vec_h[n].items():
            r = vec_r[n].get(ngram, 0.0)
            acc += min(h, r) * r
        if norm_h[n] != 0.0 and norm_r[n] != 0.0:
            acc /= norm_h[n] * norm_r[n]
        val[n] = acc * math.exp(-(delta**2) / (2.0 * sigma**2))
    return val


def cider_d(
    items: Sequence[CorpusItem], n_max: int = CIDER_N, sigma: float = CIDER_SIGMA
) -> tuple[float, list[float]]:
    """Corpus CIDEr-D and per-item scores, each in [0, 10].

    Document frequency of an n-gram is the number of corpus items whose
    reference set contains it; IDF weighting, clipping, and the length penalty
    all happen per candidate/reference pair.
    """
    if not items:
        raise ValueError("cider_d needs at least one item")
    doc_freq: Counter = Counter()
    for item in items:
        seen = set()
        for ref in item.references:
            seen.update(_ngram_counts(tokenize_ptb_lite(ref), n_max).keys())
        for ngram in seen:
            doc_freq[ngram] += 1
    log_num_items = math.log(float(len(items)))

    scores = []
    for item in items:
        cand_tokens = tokenize_ptb_lite(item.candidate)
        vec_h, norm_h, len_h = _tfidf_vector(
            _ngram_counts(cand_tokens, n_max), doc_freq, log_num_items, n_max
        )
        acc = np.zeros(n_max)
        for ref in item.references:
            vec_r, norm_r, len_r = _tfidf_vector(
                _ngram_counts(tokenize_ptb_lite(ref), n_max), doc_freq, log_num_items, n_max
            )
            acc += _clipped_similarity(
                vec_h, norm_h, len_h, vec_r, norm_r, len_r, n_max, sigma
            )
        score = 10.0 * float(np.mean(acc)) / len(item.references)
        scores.append(score)
    return float(np.mean(scores)), scores


# ---- METEOR (reduced) -------------------------------------------------------------


def stem(word: str) -> str:
    """Fixed suffix-stripping stemmer (plural, -ing/-ed with doubled-consonant
    reduction, -ly).  Deliberately small; documented as non-Porter."""
    w = word
    if len(w) > 4 and w.endswith("sses"):
        w = w[:-2]
    elif len(w) > 3 and w.endswith("ies"):
        w = w[:-3] + "i"
    elif len(w) > 3 and w.endswith("s") and not w.endswith(("ss", "us")):
        w = w[:-1]
    for suffix in ("ing", "ed"):
        if w.endswith(suffix) and len(w) - len(suffix) >= 3:
            w = w[: -len(suffix)]
            if len(w) >= 3 and w[-1] == w[-2] and w[-1] not in "lsz":
                w = w[:-1]
            break
    if w.endswith("ly") and len(w) - 2 >= 3:
        w = w[:-2]
    return w


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-stage unigram alignment: exact matches first, then stem matches.

    Within each stage candidate positions are walked left to right and matched
    to the leftmost unmatched reference token with the same key.
    """
    matches: list[tuple[int, int]] = []
    cand_used = [False] * len(cand)
    ref_used = [False] * len(ref)
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in ref]
        for ci, token in enumerate(cand):
            if cand_used[ci]:
                continue
            ck = key(token)
            for ri, rk in enumerate(ref_keys):
                if not ref_used[ri] and rk == ck:
                    matches.append((ci, ri))
                    cand_used[ci] = True
                    ref_used[ri] = True
                    break
    return sorted(matches)


def _chunk_count(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for ci, ri in matches:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def meteor_lite(
    candidate: str,
    references: Sequence[str],
    alpha: float = METEOR_ALPHA,
    beta: float = METEOR_BETA,
    gamma: float = METEOR_GAMMA,
) -> float:
    """Best-reference harmonic mean of unigram precision/recall (recall-heavy,
    F = P R / (alpha P + (1 - alpha) R)) times 1 - gamma (chunks/matches)^beta."""
    if not references:
        raise ValueError("meteor_lite needs at least one reference")
    cand = tokenize_ptb_lite(candidate)
    best = 0.0
    for reference in references:
        ref = tokenize_ptb_lite(reference)
        if not cand or not ref:
            continue
        matches = _align(cand, ref)
        m = len(matches)
        if m == 0:
            continue
        precision = m / len(cand)
        recall = m / len(ref)
        f_mean = (precision * recall) / (alpha * precision + (1 - alpha) * recall)
        penalty = gamma * (_chunk_count(matches) / m) ** beta
        best = max(best, f_mean * (1.0 - penalty))
    return best


# ---- SPIDEr family ----------------------------------------------------------------


def spider(cider_score: float, spice_score: float | None = None) -> tuple[float, bool]:
    """(CIDEr/10 + SPICE) / 2 on [0, 1]; CIDEr-only when no SPICE provider,
    returned with the degraded flag set."""
    if spice_score is None:
        return cider_score / 10.0, True
    return (cider_score / 10.0 + spice_score) / 2.0, False


def spider_fl(
    spider_score: float,
    fluency_err_prob: float,
    threshold: float = FLUENCY_THRESHOLD,
    penalty: float = FLUENCY_PENALTY,
) -> float:
    """Multiply by the penalty factor only when the error probability strictly
    exceeds the threshold."""
    if not 0.0 <= fluency_err_prob <= 1.0:
        raise ValueError("fluency_err_prob must be in [0, 1]")
    if fluency_err_prob > threshold:
        return spider_score * penalty
    return spider_score


def fense(
    candidate: str,
    references: Sequence[str],
    embedder: SentenceEmbedder,
    fluency: FluencyProvider,
    threshold: float = FLUENCY_THRESHOLD,
    penalty: float = FLUENCY_PENALTY,
) -> float:
    """Max over references of sentence-embedding cosine similarity, gated by
    the same fluency rule as SPIDEr-FL."""
    if not references:
        raise ValueError("fense needs at least one reference")
    cand_vec = np.asarray(embedder(candidate), dtype=np.float64)
    sim = max(
        cosine_similarity(cand_vec, np.asarray(embedder(r), dtype=np.float64))
        for r in references
    )
    return spider_fl(sim, fluency(candidate), threshold=threshold, penalty=penalty)


# ---- fluency heuristic ------------------------------------------------------------

_COPULAS = frozenset({"is", "are", "was", "were", "be", "been", "am"})
_FLUENCY_BIAS = -2.0
_FLUENCY_W_REPEAT = 1.2
_FLUENCY_W_NO_VERB = 1.0
_FLUENCY_W_SHORT = 1.5


def _max_repeat_run(tokens: list[str]) -> int:
    best, run = 1, 1
    for prev, cur in zip(tokens, tokens[1:]):
        run = run + 1 if cur == prev else 1
        best = max(best, run)
    return best


def _has_verb_like(tokens: list[str]) -> bool:
    for t in tokens:
        if t in _COPULAS:
            return True
        if t.endswith(("ing", "ed")):
            return True
        if len(t) >= 3 and t.endswith("s") and not t.endswith("ss"):
            return True
    return False


def fluency_error_prob(caption: str) -> float:
    """Deterministic stand-in for a trained fluency error detector.

    Scores three surface defects (token repetition runs, no verb-like token,
    fewer than three tokens) through a fixed logistic.  An empty caption is a
    certain error.
    """
    tokens = word_tokenize(caption)
    if not tokens:
        return 1.0
    z = (
        _FLUENCY_BIAS
        + _FLUENCY_W_REPEAT * (_max_repeat_run(tokens) - 1)
        + _FLUENCY_W_NO_VERB * (0.0 if _has_verb_like(tokens) else 1.0)
        + _FLUENCY_W_SHORT * (1.0 if len(tokens) < 3 else 0.0)
    )
    return 1.0 / (1.0 + math.exp(-z))


# ---- corpus evaluation ------------------------------------------------------------


def evaluate_corpus(
    items: Sequence[CorpusItem],
    spice_provider: SpiceProvider | None = None,
    embedder: SentenceEmbedder | None = None,
    fluency: FluencyProvider | None = None,
    threshold: float = FLUENCY_THRESHOLD,
    penalty: float = FLUENCY_PENALTY,
) -> dict:
    """Score a corpus with every available metric.

    Returns ``{"corpus": {...}, "items": [...], "degraded_flags": [...]}``;
    corpus values are means of item values.  Metrics whose providers are
    absent are either skipped (FENSE without an embedder) or computed in a
    flagged degraded mode (SPIDEr without SPICE).
    """
    items = list(items)
    if not items:
        raise ValueError("evaluate_corpus needs at least one item")
    fluency = fluency or fluency_error_prob
    degraded: list[str] = []
    if spice_provider is None:
        degraded.append("spider: no spice provider, reporting cider/10")
    if embedder is None:
        degraded.append("fense: no sentence embedder, metric skipped")

    _, cider_items = cider_d(items)
    rows = []
    for item, item_cider in zip(items, cider_items):
        spice_score = (
            None if spice_provider is None else float(spice_provider(item.candidate, item.references))
        )
        spider_score, _ = spider(item_cider, spice_score)
        err_prob = float(fluency(item.candidate))
        row = {
            "id": item.id,
            "cider_d": item_cider,
            "meteor": meteor_lite(item.candidate, item.references),
            "spider": spider_score,
            "spider_fl": spider_fl(spider_score, err_prob, threshold, penalty),
            "fluency_error_prob": err_prob,
        }
        if spice_score is not None:
            row["spice"] = spice_score
        if embedder is not None:
            row["fense"] = fense(
                item.candidate, item.references, embedder, fluency, threshold, penalty
            )
        rows.append(row)

    metric_names = [k for k in rows[0] if k != "id"]
    corpus = {name: float(np.mean([r[name] for r in rows])) for name in metric_names}
    return {"corpus": corpus, "items": rows, "degraded_flags": degraded}


def clap_text_embedder(clap_model) -> SentenceEmbedder:
    """Adapt a trained CLAP model's text branch to the embedder contract."""

    def embed(caption: str) -> np.ndarray:
        return clap_model.embed_text(caption).vector

    return embed
