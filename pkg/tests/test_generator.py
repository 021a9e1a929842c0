import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrepair import generator as gen
from advrepair import numcore as nc
from advrepair.codetok import EOS, PAD, SOS
from advrepair.numcore import Tensor

from .conftest import GRAD_SCALE, random_generator


def _zeros(*shape):
    return Tensor(np.zeros(shape))


class TestLstmStep:
    def test_zero_params(self):
        h, c = gen.lstm_step(Tensor(np.ones(3)), _zeros(4), _zeros(4), _zeros(3, 16), _zeros(4, 16), _zeros(16))
        assert np.array_equal(h.values, np.zeros(4)) and np.array_equal(c.values, np.zeros(4))

    def test_saturated_gates_keep_cell(self):
        H = 4
        b = np.zeros(4 * H)
        b[:H] = -30.0
        b[H : 2 * H] = 30.0
        c0 = np.array([0.5, -1.0, 2.0, 0.1])
        _, c = gen.lstm_step(Tensor(np.ones(3)), Tensor(np.full(H, 0.3)), Tensor(c0), _zeros(3, 4 * H), _zeros(H, 4 * H), Tensor(b))
        assert np.all(np.abs(c.values - c0) < 1e-9 * np.abs(c0))

    def test_shape_mismatch(self):
        with pytest.raises(nc.DimensionError):
            gen.lstm_step(Tensor(np.ones(2)), _zeros(4), _zeros(4), _zeros(3, 16), _zeros(4, 16), _zeros(16))


class TestEncoder:
    def test_lengths(self):
        cfg, p = random_generator(0)
        assert gen.encode_sequence([SOS, EOS], p, cfg).shape == (2, cfg.hidden_dim)

    def test_zero_params(self):
        cfg = gen.GeneratorConfig(vocab_size=12, embed_dim=4, hidden_dim=5)
        states = gen.encode_sequence([SOS, 7, 8, EOS], gen.zero_params(cfg), cfg)
        assert np.array_equal(states.values, np.zeros((4, 5)))

    def test_deterministic_without_training(self):
        cfg, p = random_generator(1, dropout=0.5)
        a = gen.encode_sequence([SOS, 6, 7, EOS], p, cfg).values
        b = gen.encode_sequence([SOS, 6, 7, EOS], p, cfg).values
        assert np.array_equal(a, b)

    def test_out_of_range(self):
        cfg, p = random_generator(0)
        with pytest.raises(IndexError):
            gen.encode_sequence([SOS, 12, EOS], p, cfg)

    def test_padding_does_not_change_final_state(self):
        cfg, p = random_generator(2)
        src = np.array([[SOS, 6, 7, EOS, PAD, PAD], [SOS, 6, 7, EOS, 8, 9]])
        enc = gen._encode(src, p, cfg, False, None)
        single = gen._encode(src[:1, :4], p, cfg, False, None)
        np.testing.assert_allclose(enc.h.values[0], single.h.values[0], rtol=0, atol=1e-14)


class TestAttend:
    def test_singleton(self):
        _, p = random_generator(3)
        hs = np.random.default_rng(0).normal(size=(1, 5))
        ctx, w = gen.attend(Tensor(np.ones(5)), Tensor(hs), [True], p)
        assert w.values.tolist() == [1.0]
        np.testing.assert_array_equal(ctx.values, hs[0])

    def test_zero_params_uniform_over_valid(self):
        cfg = gen.GeneratorConfig(vocab_size=12, embed_dim=4, hidden_dim=5)
        hs = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
        _, w = gen.attend(Tensor(np.ones(5)), hs, [True, True, False, True], gen.zero_params(cfg))
        np.testing.assert_allclose(w.values, [1 / 3, 1 / 3, 0, 1 / 3], atol=1e-15)

    def test_all_masked(self):
        _, p = random_generator(3)
        with pytest.raises(nc.ContractError):
            gen.attend(Tensor(np.ones(5)), Tensor(np.ones((2, 5))), [False, False], p)


class TestForward:
    def test_shape(self):
        cfg, p = random_generator(4)
        logits = gen.teacher_forced_forward([[SOS, 6, EOS]], [[SOS, 7, 8, EOS]], p, cfg)
        assert logits.shape == (1, 3, 12)

    def test_zero_params_loss_is_log_v(self):
        cfg = gen.GeneratorConfig(vocab_size=12, embed_dim=4, hidden_dim=5)
        loss = gen.mle_loss([[SOS, 6, EOS]], [[SOS, 7, 8, EOS]], gen.zero_params(cfg), cfg)
        assert loss.item() == pytest.approx(math.log(12), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(6, 15), st.integers(1, 6), st.integers(1, 6),
        st.integers(1, 3), st.integers(2, 5), st.integers(2, 5),
    )
    def test_shapes_follow_config(self, V, E, H, B, S, T):
        cfg = gen.GeneratorConfig(vocab_size=V, embed_dim=E, hidden_dim=H, dropout_rate=0.0, max_decode_len=4)
        p = gen.init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        src = rng.integers(3, V, size=(B, S))
        tgt = rng.integers(3, V, size=(B, T))
        assert gen.encode_sequence(src, p, cfg).shape == (B, S, H)
        assert gen.teacher_forced_forward(src, tgt, p, cfg).shape == (B, T - 1, V)
        assert gen.soft_decode(src, p, cfg, steps=3, noise=False).shape == (B, 3, V)
        res = gen.greedy_decode(src[0], p, cfg)
        assert 1 <= len(res.ids) <= 4


def loss_fn(cfg, p, dropout_seed):
    src = np.array([[SOS, 6, EOS], [SOS, 9, EOS]])
    tgt = np.array([[SOS, 7, 8, EOS], [SOS, 10, EOS, PAD]])
    return lambda: gen.mle_loss(src, tgt, p, cfg, training=True, rng=nc.make_rng(dropout_seed))


@pytest.mark.parametrize("seed", range(3))
def test_mle_loss_gradients(seed):
    cfg, p = random_generator(seed, dropout=0.3, scale=GRAD_SCALE)
    errs = nc.check_gradients(loss_fn(cfg, p, seed), p)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed", range(3))
def test_soft_decode_gradients(seed):
    cfg, p = random_generator(seed, dropout=0.3, scale=GRAD_SCALE)
    weights = Tensor(np.random.default_rng(seed + 100).normal(size=(3, 12)))

    def f():
        d = gen.soft_decode([SOS, 6, 7, EOS], p, cfg, steps=3, rng=nc.make_rng(seed))
        return nc.sum(d * weights)

    errs = nc.check_gradients(f, p)
    assert max(errs.values()) < 1e-4, errs


class TestSoftDecode:
    def test_rows_sum_to_one(self):
        cfg, p = random_generator(5, dropout=0.5)
        d = gen.soft_decode([SOS, 6, EOS], p, cfg, steps=5, rng=nc.make_rng(0))
        np.testing.assert_allclose(d.values.sum(axis=1), 1.0, atol=1e-9)

    def test_steps_bound(self):
        cfg, p = random_generator(5)
        with pytest.raises(nc.ContractError):
            gen.soft_decode([SOS, EOS], p, cfg, steps=cfg.max_decode_len + 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_saturated_matches_greedy(self, seed):
        cfg, p = random_generator(seed, scale=1.0)
        p["output.W"].values *= 1e4
        p["output.b"].values[[PAD, SOS]] = -1e9
        greedy = gen.greedy_decode([SOS, 6, 7, EOS], p, cfg)
        d = gen.soft_decode([SOS, 6, 7, EOS], p, cfg, steps=len(greedy.ids), noise=False)
        assert np.allclose(d.values.max(axis=1), 1.0)
        assert d.values.argmax(axis=1).tolist() == greedy.ids


class TestGreedy:
    def test_eos_bias_gives_empty_patch(self):
        cfg, p = random_generator(6)
        p["output.b"].values[EOS] = 30.0
        res = gen.greedy_decode([SOS, 6, EOS], p, cfg)
        assert res.ids == [EOS] and res.token_ids == [] and res.finished

    def test_deterministic(self):
        cfg, p = random_generator(7, dropout=0.5)
        assert gen.greedy_decode([SOS, 6, EOS], p, cfg).ids == gen.greedy_decode([SOS, 6, EOS], p, cfg).ids

    def test_never_emits_pad_or_sos(self):
        cfg, p = random_generator(8)
        p["output.b"].values[[PAD, SOS]] = 50.0
        res = gen.greedy_decode([SOS, 6, EOS], p, cfg)
        assert PAD not in res.ids and SOS not in res.ids

    def test_noise_uses_rng(self):
        cfg, p = random_generator(9, dropout=0.5, scale=2.0)
        a = gen.greedy_decode([SOS, 6, EOS], p, cfg, noise=True, rng=nc.make_rng(3))
        b = gen.greedy_decode([SOS, 6, EOS], p, cfg, noise=True, rng=nc.make_rng(3))
        assert a == b


def enumerate_best(src, p, cfg, max_len):
    """Exhaustive oracle: every EOS-terminated or max-length sequence, ranked by score per id."""
    allowed = [t for t in range(cfg.vocab_size) if t not in (PAD, SOS)]
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(allowed, repeat=n):
            if EOS in seq[:-1] or (n < max_len and seq[-1] != EOS):
                continue
            score = gen.score_sequence(src, list(seq), p, cfg) / n
            key = (-score, list(seq))
            if best is None or key < best:
                best = key
    return best[1], -best[0]


class TestBeam:
    @pytest.mark.parametrize("seed", range(10))
    def test_width_one_is_greedy(self, seed):
        cfg, p = random_generator(seed, scale=1.5)
        assert gen.beam_decode([SOS, 6, 7, EOS], p, cfg, beam_width=1)[0].ids == gen.greedy_decode([SOS, 6, 7, EOS], p, cfg).ids

    def test_sorted(self):
        cfg, p = random_generator(11, scale=1.5)
        res = gen.beam_decode([SOS, 6, EOS], p, cfg, beam_width=5)
        scores = [r.normalized_score for r in res]
        assert len(res) <= 5 and scores == sorted(scores, reverse=True)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_enumeration(self, seed):
        cfg, p = random_generator(seed, V=6, max_len=4, scale=2.0)
        src = [SOS, 5, 5, EOS]
        top = gen.beam_decode(src, p, cfg, beam_width=6**4, max_len=4)[0]
        ids, score = enumerate_best(src, p, cfg, 4)
        assert top.ids == ids
        assert top.normalized_score == pytest.approx(score, abs=1e-12)
