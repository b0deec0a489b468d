import numpy as np
import pytest

from audiocap.audio_frontend import FeatureSeq
from audiocap.captioner import Captioner, CaptionerConfig
from audiocap.clap import ClapEmbedding
from audiocap.dataset import Vocab
from audiocap.decoding import (
    Candidate,
    CandidateSet,
    beam_search,
    beam_search_ids,
    clap_refine,
    dump_candidate_sets,
    generate_candidates,
    load_candidate_sets,
    nucleus_sample_ids,
    oracle_select,
    rank_by_clap_score,
)
from audiocap.numerics import Rng, log_softmax


def toy_lm(vocab_size, seed):
    """Deterministic random LM: logits are a pure function of the prefix."""

    def scorer(prefix):
        h = seed
        for t in prefix:
            h = (h * 1000003 + t + 1) % (2**31)
        return log_softmax(Rng(h).normal(2.0, (vocab_size,)))

    return scorer


def exhaustive_best(scorer, eos_id, vocab_size, max_len):
    """Enumerate every eos-terminated sequence and take the score argmax."""
    best = None

    def rec(prefix, score, depth):
        nonlocal best
        if depth == max_len:
            return
        logp = scorer(prefix)
        for tok in range(vocab_size):
            s = score + float(logp[tok])
            if tok == eos_id:
                key = (-s, depth + 1, prefix)
                if best is None or key < best[0]:
                    best = (key, prefix, s)
            else:
                rec(prefix + (tok,), s, depth + 1)

    rec((), 0.0, 0)
    return best


def greedy_reference(scorer, eos_id, max_len):
    out, score, finished = [], 0.0, False
    for _ in range(max_len):
        logp = scorer(tuple(out))
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        if tok == eos_id:
            finished = True
            break
        out.append(tok)
    return tuple(out), score, finished


class TestBeamSearch:
    def test_beam_one_is_greedy(self):
        for trial in range(30):
            scorer = toy_lm(6, 1000 + trial)
            hyp = beam_search_ids(scorer, 0, beam_size=1, max_len=8)
            ids, score, finished = greedy_reference(scorer, 0, 8)
            assert hyp.ids == ids
            assert hyp.finished == finished
            assert hyp.score == pytest.approx(score, abs=1e-12)

    def test_matches_exhaustive_argmax(self):
        rng = Rng(7)
        for _ in range(20):
            v = int(rng.integers(3, 7))
            length = int(rng.integers(2, 5))
            scorer = toy_lm(v, int(rng.integers(0, 2**30)))
            hyp = beam_search_ids(scorer, 0, beam_size=v**length, max_len=length)
            _, best_ids, best_score = exhaustive_best(scorer, 0, v, length)
            assert hyp.finished
            assert hyp.ids == best_ids
            assert hyp.score == pytest.approx(best_score, abs=1e-12)

    def test_deterministic(self):
        scorer = toy_lm(5, 42)
        a = beam_search_ids(scorer, 0, 3, 6)
        b = beam_search_ids(scorer, 0, 3, 6)
        assert a == b

    def test_unfinished_flagged(self):
        def never_eos(prefix):
            logp = np.full(4, np.log(1 / 3))
            logp[0] = -100.0  # eos never reaches the beam
            return log_softmax(logp)

        hyp = beam_search_ids(never_eos, 0, beam_size=2, max_len=4)
        assert not hyp.finished
        assert len(hyp.ids) == 4

    def test_tie_breaks_earlier_finish_then_lexicographic(self):
        def lm(prefix):
            # step 0: eos scores -1, tokens 1/2 score -0.5
            # step 1: eos scores -0.5 -> all finished hypotheses tie at -1.0
            if len(prefix) == 0:
                return np.array([-1.0, -0.5, -0.5])
            return np.array([-0.5, -50.0, -50.0])

        hyp = beam_search_ids(lm, 0, beam_size=3, max_len=2)
        assert hyp.ids == ()  # earliest finish wins the tie

        def lm2(prefix):
            if len(prefix) == 0:
                return np.array([-50.0, -0.5, -0.5])  # eos unreachable at step 0
            return np.array([-0.5, -50.0, -50.0])

        hyp2 = beam_search_ids(lm2, 0, beam_size=3, max_len=2)
        assert hyp2.ids == (1,)  # same score as (2,); smaller token ids win

    def test_validation(self):
        with pytest.raises(ValueError):
            beam_search_ids(toy_lm(4, 0), 0, beam_size=0, max_len=3)
        with pytest.raises(ValueError):
            beam_search_ids(toy_lm(4, 0), 0, beam_size=2, max_len=0)


class TestNucleus:
    def test_tiny_top_p_is_greedy(self):
        scorer = toy_lm(6, 11)
        ids, _ = nucleus_sample_ids(scorer, 0, Rng(0), temperature=1.0, top_p=1e-12,
                                    max_len=8)
        greedy_ids, _, _ = greedy_reference(scorer, 0, 8)
        assert tuple(ids) == greedy_ids

    def test_ancestral_frequencies_within_3_sigma(self):
        probs = np.array([0.5, 0.3, 0.2])

        def one_step(prefix):
            return np.log(probs)

        rng = Rng(123)
        n = 10_000
        counts = np.zeros(3)
        for _ in range(n):
            ids, _ = nucleus_sample_ids(one_step, eos_id=-1, rng=rng, temperature=1.0,
                                        top_p=1.0, max_len=1)
            counts[ids[0]] += 1
        freqs = counts / n
        sigma = np.sqrt(probs * (1 - probs) / n)
        assert np.all(np.abs(freqs - probs) <= 3 * sigma)

    def test_fixed_seed_reproducible(self):
        scorer = toy_lm(6, 77)
        a = nucleus_sample_ids(scorer, 0, Rng(9), temperature=0.5, top_p=0.95, max_len=8)
        b = nucleus_sample_ids(scorer, 0, Rng(9), temperature=0.5, top_p=0.95, max_len=8)
        assert a == b

    def test_parameter_validation(self):
        scorer = toy_lm(4, 0)
        with pytest.raises(ValueError):
            nucleus_sample_ids(scorer, 0, Rng(0), top_p=0.0)
        with pytest.raises(ValueError):
            nucleus_sample_ids(scorer, 0, Rng(0), temperature=0.0)

    def test_lm_score_is_sum_of_logps(self):
        probs = np.array([0.25, 0.25, 0.5])

        def one_step(prefix):
            return np.log(probs)

        ids, score = nucleus_sample_ids(one_step, eos_id=-1, rng=Rng(5), temperature=1.0,
                                        top_p=1.0, max_len=3)
        assert score == pytest.approx(sum(float(np.log(probs[i])) for i in ids))


def untrained_captioner():
    vocab = Vocab(["a", "dog", "barks", "describe", "the", "audio", "you", "hear"])
    config = CaptionerConfig(vocab_size=len(vocab), enc_dim=8, enc_layers=1, enc_heads=2,
                             enc_ff=16, dec_dim=12, dec_layers=1, dec_heads=2, dec_ff=24,
                             proj_hidden=16, lora_rank=3, lora_alpha=6.0)
    return Captioner(config, vocab, Rng(3))


class TestGenerateCandidates:
    def test_default_seven_candidates(self):
        from audiocap.audio_frontend import AudioClip

        model = untrained_captioner()
        clip = AudioClip(Rng(4).normal(0.1, (8000,)), 16000)
        cset = generate_candidates(model, clip, audio_id="x", max_len=6)
        assert len(cset.candidates) == 7
        assert [c.beam_size for c in cset.candidates] == [2, 3, 4, 5, 6, 7, 8]
        assert all(np.isfinite(c.lm_score) for c in cset.candidates)

    def test_single_beam_size_baseline(self):
        from audiocap.audio_frontend import AudioClip

        model = untrained_captioner()
        clip = AudioClip(Rng(5).normal(0.1, (8000,)), 16000)
        cset = generate_candidates(model, clip, audio_id="x", beam_sizes=[4], max_len=6)
        assert len(cset.candidates) == 1
        assert cset.candidates[0].beam_size == 4


def fake_clap(audio_vec, text_vecs):
    """Duck-typed CLAP stand-in with fixed embeddings per caption."""

    class Fake:
        def embed_audio(self, clip):
            return ClapEmbedding(vector=audio_vec, modality="audio")

        def embed_text(self, caption):
            if caption not in text_vecs:
                raise ValueError(f"no embedding for {caption!r}")
            return ClapEmbedding(vector=text_vecs[caption], modality="text")

    return Fake()


def make_set(scores_by_beam):
    candidates = [
        Candidate(caption=f"caption {b}", beam_size=b, lm_score=-1.0 * b, clap_score=s)
        for b, s in scores_by_beam.items()
    ]
    return CandidateSet(audio_id="a1", candidates=candidates)


class TestClapRefine:
    def test_precomputed_scores_rank_descending(self):
        cset = make_set({2: 0.2, 3: 0.9, 4: 0.5})
        ranked = rank_by_clap_score(cset)
        assert [c.clap_score for c in ranked.candidates] == [0.9, 0.5, 0.2]
        assert ranked.chosen == "caption 3"

    def test_ties_break_to_smaller_beam(self):
        candidates = [
            Candidate(caption="same text", beam_size=b, lm_score=-1.0, clap_score=0.7)
            for b in (5, 2, 8)
        ]
        ranked = rank_by_clap_score(CandidateSet(audio_id="a", candidates=candidates))
        assert [c.beam_size for c in ranked.candidates] == [2, 5, 8]
        assert ranked.chosen == "same text"

    def test_chosen_score_is_maximum_and_ranking_is_permutation(self):
        cset = make_set({2: 0.1, 3: 0.8, 4: 0.3, 5: 0.55})
        ranked = rank_by_clap_score(cset)
        assert ranked.candidates[0].clap_score == max(c.clap_score for c in cset.candidates)
        assert sorted(c.beam_size for c in ranked.candidates) == [2, 3, 4, 5]

    def test_refine_scores_with_model_and_rescaling_invariance(self):
        captions = {f"caption {b}": Rng(b).normal(1.0, (4,)) for b in (2, 3, 4)}
        audio_vec = Rng(99).normal(1.0, (4,))
        candidates = [
            Candidate(caption=f"caption {b}", beam_size=b, lm_score=-1.0) for b in (2, 3, 4)
        ]
        base = clap_refine(
            CandidateSet(audio_id="a", candidates=candidates), fake_clap(audio_vec, captions), None
        )
        scaled = clap_refine(
            CandidateSet(audio_id="a", candidates=candidates),
            fake_clap(audio_vec * 7.5, {k: v * 3.25 for k, v in captions.items()}),
            None,
        )
        assert [c.beam_size for c in base.candidates] == [c.beam_size for c in scaled.candidates]
        assert base.chosen == scaled.chosen
        for a, b in zip(base.candidates, scaled.candidates):
            assert a.clap_score == pytest.approx(b.clap_score, abs=1e-9)

    def test_embedding_failure_drops_candidate(self):
        captions = {"caption 2": np.ones(4)}
        candidates = [
            Candidate(caption="caption 2", beam_size=2, lm_score=-1.0),
            Candidate(caption="unembeddable", beam_size=3, lm_score=-1.0),
        ]
        ranked = clap_refine(
            CandidateSet(audio_id="a", candidates=candidates),
            fake_clap(np.ones(4), captions), None,
        )
        assert len(ranked.candidates) == 1
        assert any("beam 3" in f for f in ranked.failures)


class TestOracleSelect:
    def test_single_candidate(self):
        cset = make_set({4: 0.5})
        chosen = oracle_select(cset, ["whatever"], lambda c, refs: 0.3)
        assert chosen.caption == "caption 4"

    def test_oracle_at_least_as_good_as_any_choice(self):
        cset = make_set({2: 0.2, 3: 0.9, 4: 0.5})

        def metric(caption, refs):
            return {"caption 2": 0.9, "caption 3": 0.1, "caption 4": 0.4}[caption]

        oracle = oracle_select(cset, ["r"], metric)
        refined = rank_by_clap_score(cset)
        assert metric(oracle.caption, ["r"]) >= metric(refined.chosen, ["r"])
        assert oracle.caption == "caption 2"

    def test_tie_prefers_smaller_beam(self):
        cset = make_set({5: 0.1, 2: 0.1})
        chosen = oracle_select(cset, ["r"], lambda c, refs: 1.0)
        assert chosen.beam_size == 2


class TestDumpRoundTrip:
    def test_bytes_and_values_survive(self, tmp_path):
        sets = [
            rank_by_clap_score(make_set({2: 0.2, 3: 0.9, 4: 0.5})),
            CandidateSet(
                audio_id="b1",
                candidates=[Candidate(caption="plain", beam_size=0, lm_score=-2.5)],
                chosen="plain",
            ),
        ]
        text = dump_candidate_sets(sets)
        path = tmp_path / "dump.jsonl"
        path.write_text(text)
        loaded = load_candidate_sets(path)
        assert dump_candidate_sets(loaded) == text
        assert loaded[0].chosen == "caption 3"
        assert loaded[1].candidates[0].clap_score is None
