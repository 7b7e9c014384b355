"""Training objective: per-token NLL plus the multilevel context regularizer.

The regularizer is a margin ranking loss at three granularities. With
true-context scores s_with and substituted-context scores s_without:

    data level:     [ (sum_n T_n) * delta_d  - s_data_with + s_data_without ]_+
    sentence level: sum_n [ T_n * delta_s    - s_sent_with(n) + s_sent_without(n) ]_+
    token level:    sum_n sum_t [ delta_tau  - s_tok_with(n,t) + s_tok_without(n,t) ]_+

Each term is divided by the batch's total token count sum_n T_n before
weighting, which keeps the alpha weights batch-size-invariant, and the
combined objective is

    total = nll + alpha_d * reg_data + alpha_s * reg_sent + alpha_t * reg_tok

evaluated left to right. ``context_regularizer`` is the float64
reference semantics (plain Python loops, pinned order); tests hold it to
bit equality against an independent recomputation, so keep it scalar.
The tensor path in ``total_loss`` mirrors it for gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import scoring

log = logging.getLogger(__name__)

LOG_1_1 = math.log(1.1)  # default data-level margin


@dataclass(frozen=True)
class RegConfig:
    alpha_data: float = 1.0
    alpha_sent: float = 0.0
    alpha_token: float = 1.0
    delta_data: float = LOG_1_1
    delta_sent: float = 0.0
    delta_token: float = 0.0
    m_samples: int = 1
    detach_substituted: bool = False

    def validate(self):
        for name in ("alpha_data", "alpha_sent", "alpha_token",
                     "delta_data", "delta_sent", "delta_token"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.m_samples < 1:
            raise ValueError(f"m_samples must be >= 1, got {self.m_samples}")
        return self

    @property
    def enabled(self):
        return self.alpha_data > 0 or self.alpha_sent > 0 or self.alpha_token > 0


@dataclass
class LossBreakdown:
    """Float64 record of one loss evaluation; total is derived field-wise.

    Invariant (bit-exact, same arithmetic as the constructor):
    total == ((nll + alpha_d*reg_data) + alpha_s*reg_sent) + alpha_t*reg_tok.
    """

    nll: float
    reg_data: float
    reg_sent: float
    reg_tok: float
    total: float

    @classmethod
    def combine(cls, nll, reg_data, reg_sent, reg_tok, cfg):
        total = ((nll + cfg.alpha_data * reg_data) + cfg.alpha_sent * reg_sent) \
            + cfg.alpha_token * reg_tok
        return cls(nll=nll, reg_data=reg_data, reg_sent=reg_sent,
                   reg_tok=reg_tok, total=total)


def hinge(margin, s_with, s_without):
    """Margin ranking hinge max(0, margin - s_with + s_without), float."""
    return max(0.0, margin - s_with + s_without)


def nll_from_bundle(bundle):
    """Per-token mean negative log-likelihood under the true context."""
    total_T = int(bundle.lengths.sum())
    return -bundle.data_true / total_T


def context_regularizer(bundle, cfg):
    """Reference float64 semantics: flat loops, left-to-right, divide last.

    Returns (reg_data, reg_sent, reg_tok), each already normalized by the
    batch's total token count.
    """
    lengths = [int(T) for T in bundle.lengths]
    total_T = sum(lengths)
    reg_data = hinge(total_T * cfg.delta_data, bundle.data_true, bundle.data_sub)

    reg_sent = 0.0
    for n, T in enumerate(lengths):
        reg_sent += hinge(T * cfg.delta_sent,
                          float(bundle.sent_true[n]), float(bundle.sent_sub[n]))

    reg_tok = 0.0
    for n, T in enumerate(lengths):
        for t in range(T):
            reg_tok += hinge(cfg.delta_token,
                             float(bundle.tok_true[n, t]), float(bundle.tok_sub[n, t]))

    return reg_data / total_T, reg_sent / total_T, reg_tok / total_T


def _tensor_scores(model, batch, choice, train, rng):
    logp = model.forward_batch(batch, choice, train=train, rng=rng)
    return scoring.token_scores(logp, batch)


def total_loss(model, batch, cfg, train=False, rng=None):
    """Build the training loss graph; returns (total Tensor, LossBreakdown).

    Gradients flow through both the true-context and substituted-context
    forward passes unless cfg.detach_substituted is set.
    """
    cfg.validate()
    if cfg.m_samples != 1:
        raise NotImplementedError(
            "training uses the batch derangement (M = 1); M > 1 exists only "
            "for score estimation in the scoring module")
    dtype = model.dtype
    total_T = int(batch.lengths.sum())

    tok_true = _tensor_scores(model, batch, "true", train, rng)
    nll_t = ad.scale(ad.sum_all(tok_true), -1.0 / total_T)

    use_reg = cfg.enabled and batch.has_derangement
    if cfg.enabled and not batch.has_derangement:
        log.warning("batch of size %d has no derangement; context terms skipped",
                    batch.size)

    if not use_reg:
        zero = 0.0
        breakdown = LossBreakdown.combine(float(nll_t.data), zero, zero, zero, cfg)
        return nll_t, breakdown

    tok_sub = _tensor_scores(model, batch, "shuffled", train, rng)
    if cfg.detach_substituted:
        tok_sub = ad.detach(tok_sub)
    mask = ad.Tensor(batch.y_mask[:, 1:].astype(dtype))

    # data level: one hinge over batch sums
    margin_d = ad.Tensor(np.asarray(total_T * cfg.delta_data, dtype=dtype))
    diff_data = ad.sub(ad.sum_all(tok_true), ad.sum_all(tok_sub))
    rd_t = ad.scale(ad.relu(ad.sub(margin_d, diff_data)), 1.0 / total_T)

    # sentence level: hinge per row, then sum
    margins_s = ad.Tensor((batch.lengths * cfg.delta_sent).astype(dtype))
    diff_sent = ad.sub(ad.sum_last(tok_true), ad.sum_last(tok_sub))
    rs_t = ad.scale(ad.sum_all(ad.relu(ad.sub(margins_s, diff_sent))), 1.0 / total_T)

    # token level: hinge per position, masked to real tokens
    margin_t = ad.Tensor(np.asarray(cfg.delta_token, dtype=dtype))
    diff_tok = ad.sub(tok_true, tok_sub)
    hinges = ad.mul(ad.relu(ad.sub(margin_t, diff_tok)), mask)
    rt_t = ad.scale(ad.sum_all(hinges), 1.0 / total_T)

    total_t = ad.add(ad.add(ad.add(nll_t, ad.scale(rd_t, cfg.alpha_data)),
                            ad.scale(rs_t, cfg.alpha_sent)),
                     ad.scale(rt_t, cfg.alpha_token))
    breakdown = LossBreakdown.combine(float(nll_t.data), float(rd_t.data),
                                      float(rs_t.data), float(rt_t.data), cfg)
    return total_t, breakdown
