# vslan/tests/test_decoder.py
"""Test the caption decoder, beam search and diverse generation."""
import itertools

import numpy as np
import pytest

from vslan.core.diffcore import Tensor, grad_check, log_softmax
from vslan.core.exceptions import SequenceError, TokenError
from vslan.models.data import ModelSpec
from vslan.models.vocab import BOS, EOS, PAD, POS_BOS, UNK
from vslan.services.decoder import (
    beam_decode,
    decode_step,
    diverse_decode,
    greedy_decode,
    greedy_decode_batch,
    init_state,
    sample_decode,
    sequence_log_prob,
    teacher_forced_logits,
)
from vslan.services.lan import lan_forward
from vslan.services.network import build_model, encode
from vslan.services.vapen import sample_rollout
from vslan.tests import oracles
from vslan.tests.oracles import random_input, weighted_sum


@pytest.fixture
def video(rng, tiny_model):
    """Encoder output and a G_bar for one random three-clip video."""
    enc = encode(tiny_model, [rng.standard_normal((3, 4)), rng.standard_normal((3, 3))])
    return enc, Tensor(rng.standard_normal(tiny_model.spec.dims.z))


def replay_step(w, g_bar, local, params, use_lan=True):
    """First decoding step from the zero state, written out with loops."""
    z = params.z
    x = list(params.E_word.data[w]) + list(g_bar)
    h, _ = oracles.lstm_step(x, [0.0] * params.hidden, [0.0] * params.hidden, params.lstm.W.data, params.lstm.b.data)
    if use_lan:
        attended = oracles.lan(h, local, local, params.lan)[3]
    else:
        attended = [sum(row[j] for row in local) / len(local) for j in range(z)]
    theta = oracles.matvec(params.W_A.data, attended + h, params.b_A.data)
    return oracles.matvec(params.W_v.data, [oracles.elu(t) for t in theta], params.b_v.data)


class TestDecodeStep:
    """One step of the decoder."""

    def test_init_state(self, tiny_model):
        state = init_state(tiny_model.decoder)
        assert state.h.shape == (tiny_model.spec.dims.d_h,)
        assert state.theta_prev.shape == (tiny_model.spec.dims.z,)
        np.testing.assert_array_equal(state.c.data, 0.0)
        assert init_state(tiny_model.decoder, batch=3).h.shape == (3, tiny_model.spec.dims.d_h)

    def test_logits_normalize(self, tiny_model, video):
        enc, g_bar = video
        logits, state = decode_step(BOS, init_state(tiny_model.decoder), g_bar, enc.local_final, tiny_model.decoder)
        assert logits.shape == (tiny_model.spec.vocab_size,)
        assert np.exp(log_softmax(logits).data).sum() == pytest.approx(1.0, abs=1e-12)
        assert state.theta_prev.shape == (tiny_model.spec.dims.z,)

    def test_matches_loop_oracle(self, tiny_model, video):
        enc, g_bar = video
        logits, _ = decode_step(5, init_state(tiny_model.decoder), g_bar, enc.local_final, tiny_model.decoder)
        want = replay_step(5, g_bar.data, enc.local_final.data, tiny_model.decoder)
        np.testing.assert_allclose(logits.data, want, atol=1e-10)

    def test_single_clip_attention(self, rng, tiny_model):
        local = Tensor(rng.standard_normal((1, tiny_model.spec.dims.z)))
        _, state = decode_step(BOS, init_state(tiny_model.decoder), Tensor(np.zeros(5)), local, tiny_model.decoder)
        out = lan_forward(state.h, local, local, tiny_model.decoder.lan)
        np.testing.assert_array_equal(out.attn.data, [1.0])

    def test_mean_pooling_without_decoder_lan(self, rng, tiny_spec):
        model = build_model(tiny_spec.model_copy(update={"decoder_lan": False}), seed=3)
        assert model.decoder.lan is None
        local = rng.standard_normal((3, tiny_spec.dims.z))
        g_bar = rng.standard_normal(tiny_spec.dims.z)
        logits, _ = decode_step(4, init_state(model.decoder), Tensor(g_bar), Tensor(local), model.decoder)
        np.testing.assert_allclose(logits.data, replay_step(4, g_bar, local, model.decoder, use_lan=False), atol=1e-10)

    def test_g_bar_changes_logits(self, tiny_model, video):
        enc, g_bar = video
        state = init_state(tiny_model.decoder)
        a, _ = decode_step(BOS, state, g_bar, enc.local_final, tiny_model.decoder)
        b, _ = decode_step(BOS, state, g_bar * 2.0 + 1.0, enc.local_final, tiny_model.decoder)
        assert not np.allclose(a.data, b.data)

    def test_token_out_of_range(self, tiny_model, video):
        enc, g_bar = video
        with pytest.raises(TokenError):
            decode_step(9, init_state(tiny_model.decoder), g_bar, enc.local_final, tiny_model.decoder)

    def test_gradients(self, rng, tiny_model):
        params = tiny_model.decoder
        g_bar = random_input(rng, tiny_model.spec.dims.z)
        local = random_input(rng, 2, tiny_model.spec.dims.z)
        weights = [params.E_word, params.lstm.W, params.lan.W_Q_K, params.W_A, params.W_v]

        def f(g, feats, *_):
            state = init_state(params)
            logits, state = decode_step(BOS, state, g, feats, params)
            logits2, _ = decode_step(6, state, g, feats, params)
            return weighted_sum(logits, 1) + weighted_sum(logits2, 2)

        report = grad_check(f, [g_bar, local] + weights, tol=1e-4)
        assert report.passed, report.errors


class TestTeacherForcing:
    """Log-probabilities of given captions."""

    def test_logits_shape(self, tiny_model, video):
        enc, g_bar = video
        tokens = np.array([[BOS, 4, 5, EOS]])
        logits = teacher_forced_logits(tokens, g_bar.reshape(1, -1), enc.local_final.reshape(1, 3, -1), tiny_model.decoder)
        assert logits.shape == (1, 3, tiny_model.spec.vocab_size)

    def test_padding_masked(self, tiny_model, video):
        enc, g_bar = video
        g = Tensor(np.stack([g_bar.data] * 2))
        local = Tensor(np.stack([enc.local_final.data] * 2))
        both = sequence_log_prob(np.array([[BOS, 4, 6, EOS], [BOS, 7, EOS, PAD]]), g, local, tiny_model.decoder)
        alone = sequence_log_prob(np.array([[BOS, 7, EOS]]), g[:1], local[:1], tiny_model.decoder)
        assert both.data[1] == pytest.approx(alone.data[0], abs=1e-12)
        assert np.all(both.data < 0)

    def test_short_tokens_rejected(self, tiny_model, video):
        enc, g_bar = video
        with pytest.raises(SequenceError):
            teacher_forced_logits(np.array([[BOS]]), g_bar, enc.local_final, tiny_model.decoder)


class TestGreedyAndBeam:
    """Argmax decoding and beam search."""

    def test_greedy_equals_width_one_beam(self, rng, tiny_model):
        for _ in range(5):
            enc = encode(tiny_model, [rng.standard_normal((3, 4)), rng.standard_normal((3, 3))])
            g_bar = Tensor(rng.standard_normal(5) * 2)
            greedy = greedy_decode(enc, g_bar, tiny_model.decoder, max_len=6)
            beam = beam_decode(enc, g_bar, tiny_model.decoder, width=1, max_len=6)
            assert len(beam) == 1
            assert beam[0].tokens == greedy

    def test_greedy_stops_at_eos_or_limit(self, tiny_model, video):
        enc, g_bar = video
        tokens = greedy_decode(enc, g_bar, tiny_model.decoder, max_len=4)
        assert tokens[-1] == EOS or len(tokens) == 4
        assert not set(tokens) & {PAD, BOS}

    def test_batch_matches_single(self, rng, tiny_model):
        s0, s1 = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 3))
        g_bar = Tensor(rng.standard_normal((3, 5)))
        batch = greedy_decode_batch(encode(tiny_model, [s0, s1]).local_final, g_bar, tiny_model.decoder, max_len=5)
        for i in range(3):
            enc = encode(tiny_model, [s0[i], s1[i]])
            assert batch[i] == greedy_decode(enc, Tensor(g_bar.data[i]), tiny_model.decoder, max_len=5)

    def test_scores_sorted(self, tiny_model, video):
        enc, g_bar = video
        hyps = beam_decode(enc, g_bar, tiny_model.decoder, width=4, max_len=5)
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)
        for h in hyps:
            assert h.finished == (h.tokens[-1] == EOS)
            assert h.finished or len(h.tokens) == 5

    def test_wider_beam_never_worse(self, tiny_model, video):
        enc, g_bar = video
        best = [max(h.log_prob for h in beam_decode(enc, g_bar, tiny_model.decoder, width=k, max_len=2))
                for k in (1, 2, 4)]
        assert best[0] <= best[1] + 1e-12
        assert best[1] <= best[2] + 1e-12

    def test_full_width_enumerates_everything(self, rng, tiny_dims, two_streams):
        # vocab: PAD UNK BOS EOS a b
        model = build_model(ModelSpec(dims=tiny_dims, streams=two_streams, vocab_size=6, pos_vocab_size=15), seed=8)
        enc = encode(model, [rng.standard_normal((2, 4)), rng.standard_normal((2, 3))])
        g_bar = Tensor(rng.standard_normal(5))
        hyps = beam_decode(enc, g_bar, model.decoder, width=12, max_len=2)

        open_tokens = [UNK, 4, 5]
        want = {(EOS,)} | {(w, EOS) for w in open_tokens}
        want |= {(w, v) for w, v in itertools.product(open_tokens, [UNK, 4, 5])}
        assert {tuple(h.tokens) for h in hyps} == want

        g = g_bar.reshape(1, -1)
        local = enc.local_final.reshape(1, 2, -1)
        for h in hyps:
            exact = sequence_log_prob(np.array([[BOS] + h.tokens]), g, local, model.decoder).item()
            assert h.log_prob == pytest.approx(exact, abs=1e-10)
            assert h.finished == (h.tokens[-1] == EOS)

    def test_invalid_arguments(self, tiny_model, video):
        enc, g_bar = video
        with pytest.raises(SequenceError):
            beam_decode(enc, g_bar, tiny_model.decoder, width=0)
        with pytest.raises(SequenceError):
            greedy_decode(enc, g_bar, tiny_model.decoder, max_len=0)


class TestSampling:
    """Multinomial sampling with a recorded graph."""

    def test_log_prob_matches_teacher_forcing(self, rng, tiny_model):
        s0, s1 = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 3))
        local = encode(tiny_model, [s0, s1]).local_final
        g_bar = Tensor(rng.standard_normal((2, 5)))
        samples, total = sample_decode(local, g_bar, tiny_model.decoder, np.random.default_rng(0), max_len=6)
        assert total.shape == (2,)
        width = max(len(s) for s in samples) + 1
        padded = np.array([[BOS] + s + [PAD] * (width - 1 - len(s)) for s in samples])
        exact = sequence_log_prob(padded, g_bar, local, tiny_model.decoder)
        np.testing.assert_allclose(total.data, exact.data, atol=1e-10)
        for s in samples:
            assert s[-1] == EOS or len(s) == 6
            assert not set(s) & {PAD, BOS}

    def test_same_generator_seed_same_samples(self, rng, tiny_model):
        local = Tensor(rng.standard_normal((2, 3, 5)))
        g_bar = Tensor(rng.standard_normal((2, 5)))
        a, _ = sample_decode(local, g_bar, tiny_model.decoder, np.random.default_rng(4), max_len=6)
        b, _ = sample_decode(local, g_bar, tiny_model.decoder, np.random.default_rng(4), max_len=6)
        assert a == b


class TestDiverseDecode:
    """One beam-decoded caption per prior rollout."""

    def test_reproducible(self, tiny_model, video):
        enc, _ = video
        a = diverse_decode(enc, tiny_model.decoder, tiny_model.vapen, n_samples=3, seed=2, width=2, max_len=5)
        b = diverse_decode(enc, tiny_model.decoder, tiny_model.vapen, n_samples=3, seed=2, width=2, max_len=5)
        assert a == b
        assert len(a) == 3
        for tokens, pos in a:
            assert pos[0] == POS_BOS

    def test_single_sample_is_rollout_then_beam(self, tiny_model, video):
        enc, _ = video
        [(tokens, pos)] = diverse_decode(enc, tiny_model.decoder, tiny_model.vapen, n_samples=1, seed=9, width=3,
                                         max_len=5)
        rollout = sample_rollout(enc.g_tilde, tiny_model.vapen, 9, 5)
        assert pos == rollout.pos
        assert tokens == beam_decode(enc, rollout.g_bar, tiny_model.decoder, width=3, max_len=5)[0].tokens

    def test_needs_a_sample(self, tiny_model, video):
        enc, _ = video
        with pytest.raises(SequenceError):
            diverse_decode(enc, tiny_model.decoder, tiny_model.vapen, n_samples=0)
