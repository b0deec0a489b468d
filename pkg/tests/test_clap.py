import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocap.audio_frontend import AudioClip
from audiocap.clap import (
    ClapConfig,
    ClapEmbedding,
    ClapModel,
    cosine_similarity,
    infonce_loss,
)
from audiocap.dataset import Vocab
from audiocap.numerics import Rng, Tensor, finite_difference_check


def toy_clap():
    vocab = Vocab(["a", "dog", "barks", "cat", "meows"])
    return ClapModel(
        ClapConfig(vocab_size=len(vocab), d_model=8, d_clap=6, audio_layers=1,
                   text_layers=1, n_heads=2, d_ff=16),
        vocab, Rng(0),
    )


class TestCosine:
    def test_identical_directions(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_45_degrees(self):
        assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.70710678, abs=1e-8)

    def test_symmetric(self):
        a, b = Rng(1).normal(1.0, (5,)), Rng(2).normal(1.0, (5,))
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))

    @settings(max_examples=60, deadline=None)
    @given(st.floats(min_value=1e-3, max_value=1e3))
    def test_positive_scale_invariance(self, lam):
        a = np.array([0.3, -1.2, 0.7])
        b = np.array([1.1, 0.4, -0.2])
        assert cosine_similarity(a, lam * b) == pytest.approx(
            cosine_similarity(a, b), abs=1e-9
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_accepts_embedding_objects(self):
        a = ClapEmbedding(vector=[1.0, 0.0], modality="audio")
        t = ClapEmbedding(vector=[1.0, 0.0], modality="text")
        assert cosine_similarity(a, t) == pytest.approx(1.0)


class TestInfoNCE:
    def test_uniform_similarities_give_log_n(self):
        n, d = 5, 4
        same = [np.ones(d) for _ in range(n)]
        assert infonce_loss(same, same, 1.0) == pytest.approx(math.log(n), abs=1e-12)

    def test_dominant_diagonal_drives_loss_to_zero(self):
        # orthogonal pairs at a tiny temperature: softmax saturates on the diagonal
        eye = [np.eye(4)[i] for i in range(4)]
        assert infonce_loss(eye, eye, 1e-3) < 1e-9

    def test_two_by_two_hand_case(self):
        a = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        t = [np.array([1.0, 0.2]), np.array([0.1, 1.0])]
        # direct formula: S[i][j] = cos(a_i, t_j); per-row and per-column CE
        s = np.array([[cosine_similarity(x, y) for y in t] for x in a])
        def ce(row, idx):
            z = np.exp(row - row.max())
            return -math.log(z[idx] / z.sum())
        expected = 0.5 * (
            (ce(s[0], 0) + ce(s[1], 1)) / 2 + (ce(s.T[0], 0) + ce(s.T[1], 1)) / 2
        )
        assert infonce_loss(a, t, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_permutation_equivariance(self):
        rng = Rng(3)
        a = [rng.normal(1.0, (6,)) for _ in range(5)]
        t = [rng.normal(1.0, (6,)) for _ in range(5)]
        base = infonce_loss(a, t, 0.5)
        perm = [3, 0, 4, 1, 2]
        shuffled = infonce_loss([a[i] for i in perm], [t[i] for i in perm], 0.5)
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_batch_size_validation(self):
        v = [np.ones(3)]
        with pytest.raises(ValueError, match=">= 2"):
            infonce_loss(v, v, 1.0)
        with pytest.raises(ValueError, match=">= 2"):
            infonce_loss(v * 3, v * 2, 1.0)

    def test_gradients_match_finite_differences(self):
        rng = Rng(4)
        n, d = 4, 5
        a = [rng.normal(1.0, (d,)) for _ in range(n)]
        t = [rng.normal(1.0, (d,)) for _ in range(n)]
        at = Tensor(np.stack(a), requires_grad=True)

        def f(tensor):
            grads = {}
            loss = infonce_loss([tensor.data[i] for i in range(n)], t, 0.3, grads)
            tensor.accumulate_grad(np.stack(grads["d_audio"]))
            return loss

        assert finite_difference_check(f, at) < 1e-8


class TestEmbeddings:
    def test_same_clip_same_embedding(self):
        model = toy_clap()
        clip = AudioClip(Rng(5).normal(0.1, (8000,)), 16000)
        a = model.embed_audio(clip)
        b = model.embed_audio(clip)
        assert np.array_equal(a.vector, b.vector)
        assert a.modality == "audio"

    def test_dimension_from_config(self):
        model = toy_clap()
        clip = AudioClip(Rng(6).normal(0.1, (8000,)), 16000)
        assert model.embed_audio(clip).vector.shape == (6,)
        assert model.embed_text("a dog barks").vector.shape == (6,)

    def test_empty_caption_rejected(self):
        model = toy_clap()
        with pytest.raises(ValueError, match="empty"):
            model.embed_text("")
        with pytest.raises(ValueError, match="empty"):
            model.embed_text("...")  # normalizes to nothing

    def test_temperature_clamp(self):
        model = toy_clap()
        model.temperature.data[:] = 50.0
        model.clamp_temperature()
        assert model.temperature.data[0] == 1.0
        model.temperature.data[:] = 1e-9
        model.clamp_temperature()
        assert model.temperature.data[0] == pytest.approx(1e-3)
