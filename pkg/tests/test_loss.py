"""Loss tests: hinge arithmetic, the exact regularizer semantics against a
flat-loop oracle, NLL values, the combined objective, and its gradients."""

import logging
import math

import numpy as np
import pytest

import lcnmt.autodiff as ad
from lcnmt import loss as L
from lcnmt import scoring as S
from lcnmt.model import Model, ModelConfig
from test_autodiff import max_rel_err, numeric_grad
from test_model import demo_batch, make_batch, tiny_config


def stock_defaults(**kw):
    return L.RegConfig(**kw)  # the shipped defaults, spelled out in test_stock_defaults


def random_bundle(rng, B=2, T=5):
    """Random score table shaped like a ScoreBundle, scores <= 0."""
    lengths = rng.integers(1, T + 1, size=B)
    tok_true = np.zeros((B, T))
    tok_sub = np.zeros((B, T))
    for n, Tn in enumerate(lengths):
        tok_true[n, :Tn] = -rng.random(Tn) * 3
        tok_sub[n, :Tn] = -rng.random(Tn) * 3
    sent_true = S.sentence_scores(tok_true, lengths)
    sent_sub = S.sentence_scores(tok_sub, lengths)
    return S.ScoreBundle(tok_true=tok_true, tok_sub=tok_sub,
                         sent_true=sent_true, sent_sub=sent_sub,
                         data_true=S.data_score(sent_true),
                         data_sub=S.data_score(sent_sub),
                         lengths=np.asarray(lengths), M=1)


def flat_loop_regularizer(bundle, cfg):
    """Independent reference: same arithmetic spelled out longhand."""
    lengths = [int(x) for x in bundle.lengths]
    total = 0
    for T in lengths:
        total += T

    d = total * cfg.delta_data - bundle.data_true + bundle.data_sub
    reg_data = d if d > 0.0 else 0.0

    reg_sent = 0.0
    for n in range(len(lengths)):
        h = lengths[n] * cfg.delta_sent - float(bundle.sent_true[n]) \
            + float(bundle.sent_sub[n])
        reg_sent += h if h > 0.0 else 0.0

    reg_tok = 0.0
    for n in range(len(lengths)):
        for t in range(lengths[n]):
            h = cfg.delta_token - float(bundle.tok_true[n, t]) \
                + float(bundle.tok_sub[n, t])
            reg_tok += h if h > 0.0 else 0.0

    return reg_data / total, reg_sent / total, reg_tok / total


class TestHinge:
    def test_boundary_zero(self):
        assert L.hinge(0.0, -1.5, -1.5) == 0.0

    def test_unit_violation(self):
        assert L.hinge(0.0, -2.0, -1.0) == 1.0

    def test_margin_log_one_point_one(self):
        # margin log(1.1), advantage 0.05 -> 0.09531... - 0.05
        got = L.hinge(math.log(1.1), -1.0, -1.05)
        assert abs(got - 0.04531) < 1e-5

    def test_inactive_when_advantage_exceeds_margin(self):
        assert L.hinge(math.log(1.1), -1.0, -1.2) == 0.0


class TestRegConfig:
    def test_stock_defaults(self):
        cfg = stock_defaults()
        assert cfg.alpha_data == 1.0 and cfg.alpha_token == 1.0
        assert cfg.alpha_sent == 0.0
        assert cfg.delta_sent == 0.0 and cfg.delta_token == 0.0
        assert cfg.delta_data == pytest.approx(0.09531018, abs=1e-8)
        assert cfg.m_samples == 1

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError, match="alpha_data"):
            L.RegConfig(alpha_data=-0.1).validate()
        with pytest.raises(ValueError, match="delta_token"):
            L.RegConfig(delta_token=-1.0).validate()


class TestContextRegularizer:
    def test_identical_scores_zero_margins(self):
        rng = np.random.default_rng(0)
        b = random_bundle(rng)
        b.tok_sub = b.tok_true.copy()
        b.sent_sub = b.sent_true.copy()
        b.data_sub = b.data_true
        cfg = L.RegConfig(delta_data=0.0, delta_sent=0.0, delta_token=0.0)
        assert L.context_regularizer(b, cfg) == (0.0, 0.0, 0.0)

    def test_inactive_when_true_context_dominates(self):
        lengths = np.array([2, 1])
        tok_true = np.array([[-0.1, -0.1, 0.0], [-0.1, 0.0, 0.0]])
        tok_sub = np.array([[-2.0, -2.0, 0.0], [-2.0, 0.0, 0.0]])
        st, ss = S.sentence_scores(tok_true, lengths), S.sentence_scores(tok_sub, lengths)
        b = S.ScoreBundle(tok_true, tok_sub, st, ss, S.data_score(st),
                          S.data_score(ss), lengths, 1)
        assert L.context_regularizer(b, stock_defaults()) == (0.0, 0.0, 0.0)

    def test_hand_picked_two_sentence_table(self):
        # T = [2, 1]; margins: data = 3*log(1.1), sentence/token = 0
        lengths = np.array([2, 1])
        tok_true = np.array([[-1.0, -0.5, 0.0], [-0.25, 0.0, 0.0]])
        tok_sub = np.array([[-0.8, -0.9, 0.0], [-0.05, 0.0, 0.0]])
        st, ss = S.sentence_scores(tok_true, lengths), S.sentence_scores(tok_sub, lengths)
        b = S.ScoreBundle(tok_true, tok_sub, st, ss, S.data_score(st),
                          S.data_score(ss), lengths, 1)
        cfg = stock_defaults()
        got = L.context_regularizer(b, cfg)
        want = flat_loop_regularizer(b, cfg)
        assert got == want  # same precision, same order: bit-exact
        # spot arithmetic: data diff = (-1.75) - (-1.75) = 0 -> hinge = margin
        assert got[0] == pytest.approx(math.log(1.1), abs=1e-15)
        # token hinges: [0]: -1+0.8<0 keep 0.2? no: margin0 -(-1)+(-0.8)=0.2 -> 0.2
        assert got[2] == pytest.approx((0.2 + 0.0 + 0.2) / 3, abs=1e-12)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_flat_loop_exactly_random_tables(self, seed):
        rng = np.random.default_rng(seed)
        b = random_bundle(rng, B=int(rng.integers(2, 6)), T=int(rng.integers(1, 7)))
        cfg = L.RegConfig(
            alpha_data=float(rng.random()), alpha_sent=float(rng.random()),
            alpha_token=float(rng.random()), delta_data=float(rng.random() * 0.2),
            delta_sent=float(rng.random() * 0.2), delta_token=float(rng.random() * 0.2))
        assert L.context_regularizer(b, cfg) == flat_loop_regularizer(b, cfg)

    def test_monotone_in_margins(self):
        rng = np.random.default_rng(3)
        b = random_bundle(rng, B=4, T=6)
        base = L.context_regularizer(b, L.RegConfig())
        for scale in (1.5, 3.0, 10.0):
            cfg = L.RegConfig(delta_data=L.LOG_1_1 * scale,
                              delta_sent=0.01 * scale, delta_token=0.01 * scale)
            bigger = L.context_regularizer(b, cfg)
            grown = L.context_regularizer(
                b, L.RegConfig(delta_data=L.LOG_1_1 * scale * 2,
                               delta_sent=0.02 * scale, delta_token=0.02 * scale))
            assert all(x >= y for x, y in zip(bigger, base))
            assert all(x >= y for x, y in zip(grown, bigger))

    def test_nonnegative_always(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            b = random_bundle(rng, B=3, T=4)
            rd, rs, rt = L.context_regularizer(b, L.RegConfig(
                delta_data=float(rng.random()), delta_sent=float(rng.random()),
                delta_token=float(rng.random())))
            assert rd >= 0 and rs >= 0 and rt >= 0


class TestNll:
    def test_uniform_model(self):
        m = Model(tiny_config(), np.random.default_rng(0))
        b = demo_batch()
        V = 12
        uniform_tok = np.where(b.y_mask[:, 1:], -np.log(V), 0.0)
        lengths = b.lengths
        sent = S.sentence_scores(uniform_tok, lengths)
        bundle = S.ScoreBundle(uniform_tok, uniform_tok, sent, sent,
                               S.data_score(sent), S.data_score(sent), lengths, 1)
        np.testing.assert_allclose(L.nll_from_bundle(bundle), np.log(V), rtol=1e-12)

    def test_perfect_model_zero(self):
        lengths = np.array([2, 3])
        tok = np.zeros((2, 3))
        sent = S.sentence_scores(tok, lengths)
        bundle = S.ScoreBundle(tok, tok, sent, sent, 0.0, 0.0, lengths, 1)
        assert L.nll_from_bundle(bundle) == 0.0


class TestTotalLoss:
    def test_alphas_zero_reduces_to_nll(self):
        m = Model(tiny_config(), np.random.default_rng(1))
        b = demo_batch()
        cfg = L.RegConfig(alpha_data=0.0, alpha_sent=0.0, alpha_token=0.0)
        total_t, bd = L.total_loss(m, b, cfg)
        assert bd.total == bd.nll
        assert (bd.reg_data, bd.reg_sent, bd.reg_tok) == (0.0, 0.0, 0.0)
        assert float(total_t.data) == bd.nll

    def test_breakdown_invariant_bitwise(self):
        m = Model(tiny_config(), np.random.default_rng(2))
        b = demo_batch()
        cfg = L.RegConfig(alpha_sent=0.3, delta_sent=0.05, delta_token=0.02)
        _, bd = L.total_loss(m, b, cfg)
        recomputed = ((bd.nll + cfg.alpha_data * bd.reg_data)
                      + cfg.alpha_sent * bd.reg_sent) + cfg.alpha_token * bd.reg_tok
        assert bd.total == recomputed
        assert bd.reg_data >= 0 and bd.reg_sent >= 0 and bd.reg_tok >= 0

    def test_context_blind_zero_margins_zero_regs(self):
        m = Model(tiny_config(context_mode="context-blind"), np.random.default_rng(3))
        b = demo_batch()
        cfg = L.RegConfig(delta_data=0.0, delta_sent=0.0, delta_token=0.0)
        _, bd = L.total_loss(m, b, cfg)
        assert (bd.reg_data, bd.reg_sent, bd.reg_tok) == (0.0, 0.0, 0.0)

    def test_matches_reference_regularizer_on_eval_scores(self):
        m = Model(tiny_config(), np.random.default_rng(4), dtype=np.float64)
        b = demo_batch()
        cfg = stock_defaults()
        _, bd = L.total_loss(m, b, cfg)
        bundle = S.score_batch(m, b, M=1)
        rd, rs, rt = L.context_regularizer(bundle, cfg)
        assert bd.nll == pytest.approx(L.nll_from_bundle(bundle), rel=1e-12)
        assert bd.reg_data == pytest.approx(rd, rel=1e-9, abs=1e-12)
        assert bd.reg_sent == pytest.approx(rs, rel=1e-9, abs=1e-12)
        assert bd.reg_tok == pytest.approx(rt, rel=1e-9, abs=1e-12)

    def test_sentence_table_irrelevant_when_alpha_sent_zero(self):
        m = Model(tiny_config(), np.random.default_rng(5))
        b = demo_batch()
        _, bd1 = L.total_loss(m, b, L.RegConfig(delta_sent=0.0))
        _, bd2 = L.total_loss(m, b, L.RegConfig(delta_sent=5.0))
        assert bd1.total == bd2.total

    def test_batch_of_one_skips_reg_with_warning(self, caplog):
        m = Model(tiny_config(), np.random.default_rng(6))
        b = make_batch([[4, 5, 6]], [[7, 8]], [[9, 10]])
        with caplog.at_level(logging.WARNING, logger="lcnmt.loss"):
            _, bd = L.total_loss(m, b, stock_defaults())
        assert (bd.reg_data, bd.reg_sent, bd.reg_tok) == (0.0, 0.0, 0.0)
        assert any("derangement" in r.message for r in caplog.records)

    def test_m_samples_above_one_not_trainable(self):
        m = Model(tiny_config(), np.random.default_rng(7))
        with pytest.raises(NotImplementedError, match="M = 1"):
            L.total_loss(m, demo_batch(), L.RegConfig(m_samples=2))

    def test_detach_substituted_changes_gradients(self):
        b = demo_batch(n=2, seed=5)
        grads = {}
        for detach in (False, True):
            m = Model(tiny_config(), np.random.default_rng(8), dtype=np.float64)
            cfg = L.RegConfig(detach_substituted=detach)
            with ad.Tape() as tape:
                total_t, _ = L.total_loss(m, b, cfg)
            g = tape.backward(total_t)
            grads[detach] = g[m.params["embed"]]
            assert np.all(np.isfinite(grads[detach]))
        assert np.max(np.abs(grads[False] - grads[True])) > 0


class TestTotalLossGradients:
    def test_gradcheck_both_passes(self):
        cfg = ModelConfig(vocab_size=12, n_layers=1, d_model=8, n_heads=4, d_ff=8,
                          dropout=0.0)
        m = Model(cfg, np.random.default_rng(23), dtype=np.float64)
        b = demo_batch(n=2, seed=6)
        reg = stock_defaults()

        def make_loss():
            total_t, _ = L.total_loss(m, b, reg)
            return total_t

        with ad.Tape() as tape:
            total_t = make_loss()
        grads = tape.backward(total_t)
        for t in m.params.values():
            num = numeric_grad(lambda: float(make_loss().data), t.data)
            err = max_rel_err(grads[t], num)
            assert err < 1e-4, f"{t.name}: rel err {err:.2e}"
