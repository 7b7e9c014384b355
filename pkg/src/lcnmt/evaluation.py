"""Decoding (greedy/beam), corpus BLEU, and the context-sensitivity metrics.

The two intrinsic metrics measure how much a model's behaviour depends on
the document context C:

* ``intrinsic_delta``: difference between the data-level log-probability of
  the references under the true contexts and under a context-less estimate
  obtained by substituting deranged contexts (log-mean-exp over M draws).
* ``delta_bleu``: corpus BLEU when decoding with the true contexts minus
  the mean corpus BLEU over R independent context derangements.

Both are exactly 0.0 for any model whose output provably never depends on
C (a context-blind model, or a gated model with the gate forced to zero):
substitution then changes nothing bitwise, and both metrics are means of
exact per-draw differences.

Context substitution here operates at corpus scope (one derangement of the
whole dataset), unlike the batch-scope substitution used by the training
regularizer.
"""

import math
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .data import BOS_ID, EOS_ID, make_eval_batches, sample_derangement
from .scoring import data_score, log_mean_exp, sentence_scores, token_scores


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    beam_size: int = 5
    length_exponent: float = 0.6  # alpha in lp(Y) = ((5+|Y|)/6)^alpha
    max_len: int = 32

    def validate(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"mode must be 'greedy' or 'beam', got {self.mode!r}")
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.length_exponent < 0:
            raise ValueError("length_exponent must be >= 0")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        return self


@dataclass(frozen=True)
class Hypothesis:
    """A decoded sequence: emitted tokens (EOS included when finished)."""

    tokens: tuple
    score: float          # sum of token log-probabilities
    truncated: bool       # True when max_len was hit before EOS

    def adjusted(self, alpha):
        return self.score / length_penalty(len(self.tokens), alpha)


def length_penalty(n_tokens, alpha):
    return ((5.0 + n_tokens) / 6.0) ** alpha


def _merged_source(model, batch):
    """Encoder output the decoder attends to (values only, eval mode)."""
    x_c = model.encode_merged(batch.X, batch.x_mask, batch.C, batch.c_mask,
                              train=False)
    return x_c.data, batch.x_mask


def greedy_decode_batch(model, batch, max_len):
    """Argmax decoding of every row of a batch; ties go to the lowest id."""
    xc_data, src_mask = _merged_source(model, batch)
    x_c = ad.Tensor(xc_data)
    B = batch.size
    ys = np.full((B, 1), BOS_ID, dtype=np.int64)
    tokens = [[] for _ in range(B)]
    scores = [0.0] * B
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        logp = model.decode_step(ys, x_c, src_mask)  # (B, V)
        nxt = np.argmax(logp, axis=1)
        for b in range(B):
            if not alive[b]:
                continue
            tokens[b].append(int(nxt[b]))
            scores[b] += float(logp[b, nxt[b]])
            if nxt[b] == EOS_ID:
                alive[b] = False
        if not alive.any():
            break
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
    return [Hypothesis(tuple(t), s, bool(a))
            for t, s, a in zip(tokens, scores, alive)]


def beam_decode_row(model, batch, row, cfg: DecodeConfig):
    """Beam search for one row of a batch.

    Candidate shortlisting inside a hypothesis ranks by the step
    log-probabilities alone (cumulative score is a constant there), so with
    beam_size=1 the chosen token is bitwise the greedy argmax. Completed
    hypotheses are kept until max_len and ranked by length-adjusted score;
    ties resolve to the earliest-completed hypothesis.
    """
    xc_data, src_mask = _merged_source(model, batch)
    xc_row = xc_data[row:row + 1]
    mask_row = src_mask[row:row + 1]
    k = cfg.beam_size
    live = [((), 0.0)]  # (emitted tokens, cumulative log-prob)
    completed = []
    for _ in range(cfg.max_len):
        ys = np.array([(BOS_ID,) + toks for toks, _ in live], dtype=np.int64)
        x_c = ad.Tensor(np.repeat(xc_row, len(live), axis=0))
        logp = model.decode_step(ys, x_c, np.repeat(mask_row, len(live), axis=0))
        candidates = []
        for i, (toks, cum) in enumerate(live):
            shortlist = np.argsort(-logp[i], kind="stable")[:k]
            for v in shortlist:
                candidates.append((toks + (int(v),), cum + float(logp[i, v])))
        next_live = []
        for toks, cum in sorted(candidates, key=lambda c: -c[1]):
            if toks[-1] == EOS_ID:
                completed.append(Hypothesis(toks, cum, False))
            elif len(next_live) < k:
                next_live.append((toks, cum))
        live = next_live
        if not live:
            break
    if completed:
        return max(completed, key=lambda h: h.adjusted(cfg.length_exponent))
    best = max(live, key=lambda c: c[1] / length_penalty(len(c[0]), cfg.length_exponent))
    return Hypothesis(best[0], best[1], True)


def decode_corpus(model, data, cfg: DecodeConfig, batch_size=32):
    """Decode every triplet with its stored context; returns Hypothesis list."""
    cfg.validate()
    out = []
    for batch in make_eval_batches(data, batch_size):
        if cfg.mode == "greedy":
            out.extend(greedy_decode_batch(model, batch, cfg.max_len))
        else:
            out.extend(beam_decode_row(model, batch, r, cfg)
                       for r in range(batch.size))
    return out


def strip_eos(tokens):
    """Emitted tokens without the trailing EOS (references come as BOS..EOS)."""
    toks = list(tokens)
    if toks and toks[0] == BOS_ID:
        toks = toks[1:]
    if toks and toks[-1] == EOS_ID:
        toks = toks[:-1]
    return tuple(toks)


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_ngram_stats(hyp, ref, max_order=4):
    """Per-sentence (clipped matches, totals) for orders 1..4 plus lengths."""
    matches = np.zeros(max_order, dtype=np.int64)
    totals = np.zeros(max_order, dtype=np.int64)
    for n in range(1, max_order + 1):
        hc = _ngram_counts(hyp, n)
        totals[n - 1] = max(len(hyp) - n + 1, 0)
        if hc:
            rc = _ngram_counts(ref, n)
            matches[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
    return matches, totals, len(hyp), len(ref)


def bleu_from_stats(matches, totals, hyp_len, ref_len, smooth=False):
    """Corpus BLEU from summed statistics: clipped precisions, BP, no smoothing
    by default; the smoothing flag adds one to both counts of any zero-match
    order (useful on tiny corpora where 4-grams vanish)."""
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        m, t = int(m), int(t)
        if smooth and m == 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    log_p /= len(matches)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def corpus_bleu(hypotheses, references, smooth=False):
    """Corpus-level 4-gram BLEU in [0, 100]; token sequences, one reference."""
    if len(hypotheses) != len(references):
        raise EvalError(f"{len(hypotheses)} hypotheses vs "
                        f"{len(references)} references")
    if not hypotheses:
        raise EvalError("empty corpus")
    matches = np.zeros(4, dtype=np.int64)
    totals = np.zeros(4, dtype=np.int64)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        m, t, hl, rl = sentence_ngram_stats(hyp, ref)
        matches += m
        totals += t
        hyp_len += hl
        ref_len += rl
    return bleu_from_stats(matches, totals, hyp_len, ref_len, smooth)


# ---------------------------------------------------------------------------
# context substitution at corpus scope


def corpus_derangement(n, seed):
    perm, ok = sample_derangement(n, np.random.default_rng(seed))
    if not ok:
        raise EvalError(f"need >= 2 examples for a context derangement, got {n}")
    return perm


def substitute_contexts(data, perm):
    """Each example keeps its X/Y but receives example perm[i]'s context."""
    return [replace(t, context=data[int(p)].context) for t, p in zip(data, perm)]


def _corpus_token_scores(model, data, batch_size):
    """Per-sentence token score vectors under the stored contexts."""
    rows = []
    for batch in make_eval_batches(data, batch_size):
        logp = model.forward_batch(batch, "true", train=False)
        tok = token_scores(logp, batch).data
        for i in range(batch.size):
            rows.append(tok[i, :batch.lengths[i]].astype(np.float64))
    return rows


@dataclass
class IntrinsicDelta:
    """Data-level score difference, true contexts minus context-less estimate."""

    raw: float
    per_token: float
    sent_true: np.ndarray
    sent_sub: np.ndarray
    lengths: np.ndarray
    m_samples: int

    @property
    def sent_diff(self):
        return self.sent_true - self.sent_sub


def intrinsic_delta(model, data, m_samples=1, seed=0, batch_size=32):
    """Context-sensitivity of the model's scores on a dataset.

    For each of M derangements (seeded seed+0 .. seed+M-1) the whole
    dataset's contexts are substituted and the references re-scored; the
    context-less token score is the log-mean-exp over the M draws. Returns
    raw and per-token differences plus per-sentence score pairs.
    """
    if m_samples < 1:
        raise EvalError(f"m_samples must be >= 1, got {m_samples}")
    n = len(data)
    tok_true = _corpus_token_scores(model, data, batch_size)
    draws = []  # draws[m][i] = token scores of sentence i under derangement m
    for m in range(m_samples):
        perm = corpus_derangement(n, seed + m)
        draws.append(_corpus_token_scores(
            model, substitute_contexts(data, perm), batch_size))
    tok_sub = [log_mean_exp(np.stack([draws[m][i] for m in range(m_samples)]))
               for i in range(n)]

    lengths = np.array([t.T for t in data], dtype=np.int64)
    width = int(lengths.max())
    true_mat = np.zeros((n, width))
    sub_mat = np.zeros((n, width))
    for i in range(n):
        true_mat[i, :lengths[i]] = tok_true[i]
        sub_mat[i, :lengths[i]] = tok_sub[i]
    sent_true = sentence_scores(true_mat, lengths)
    sent_sub = sentence_scores(sub_mat, lengths)
    raw = data_score(sent_true) - data_score(sent_sub)
    return IntrinsicDelta(raw=raw, per_token=raw / int(lengths.sum()),
                          sent_true=sent_true, sent_sub=sent_sub,
                          lengths=lengths, m_samples=m_samples)


@dataclass
class DeltaBleu:
    delta: float           # mean over R of (BLEU_true - BLEU_r)
    bleu_true: float
    bleu_substituted: float  # bleu_true - delta, so the identity is exact
    per_shuffle: list
    hyps_true: list = None   # Hypothesis lists, kept on request only
    hyps_sub: list = None    # one list per shuffle


def delta_bleu(model, data, r_shuffles=3, seed=0, decode_cfg=None, batch_size=32,
               keep_hypotheses=False):
    """BLEU with true contexts minus mean BLEU over R context derangements.

    The derangements use seeds seed+0 .. seed+R-1. The delta is computed as
    the mean of per-shuffle differences so a context-independent model gets
    exactly 0.0 (each difference is exactly zero); the reported substituted
    BLEU is derived as bleu_true - delta to keep the identity exact. With
    keep_hypotheses the decoded Hypothesis lists ride along for downstream
    analysis (accuracy, curves) without a second decode.
    """
    if r_shuffles < 1:
        raise EvalError(f"r_shuffles must be >= 1, got {r_shuffles}")
    cfg = (decode_cfg or DecodeConfig()).validate()
    refs = [strip_eos(t.target) for t in data]
    decoded_true = decode_corpus(model, data, cfg, batch_size)
    bleu_true = corpus_bleu([strip_eos(h.tokens) for h in decoded_true], refs)
    per_shuffle = []
    decoded_sub = []
    for r in range(r_shuffles):
        perm = corpus_derangement(len(data), seed + r)
        decoded_r = decode_corpus(model, substitute_contexts(data, perm),
                                  cfg, batch_size)
        per_shuffle.append(corpus_bleu([strip_eos(h.tokens) for h in decoded_r],
                                       refs))
        if keep_hypotheses:
            decoded_sub.append(decoded_r)
    delta = math.fsum(bleu_true - b for b in per_shuffle) / r_shuffles
    return DeltaBleu(delta=delta, bleu_true=bleu_true,
                     bleu_substituted=bleu_true - delta,
                     per_shuffle=per_shuffle,
                     hyps_true=decoded_true if keep_hypotheses else None,
                     hyps_sub=decoded_sub if keep_hypotheses else None)


# ---------------------------------------------------------------------------
# per-sentence analysis (cumulative BLEU by score difference)


@dataclass
class CurveRow:
    rank: int
    score_diff: float
    cum_bleu_true: float
    cum_bleu_sub: float
    index: int  # position in the dataset


def cumulative_curve(score_diffs, hyps_true, hyps_sub, refs, smooth=False):
    """Sentences sorted by descending score difference (stable on ties);
    each row reports corpus BLEU over the prefix for both decodes, so the
    last row equals the full corpus BLEU pair."""
    n = len(refs)
    if not (len(score_diffs) == len(hyps_true) == len(hyps_sub) == n):
        raise EvalError("curve inputs must have equal lengths")
    order = np.argsort(-np.asarray(score_diffs, dtype=np.float64), kind="stable")
    stats_t = [sentence_ngram_stats(h, r) for h, r in zip(hyps_true, refs)]
    stats_s = [sentence_ngram_stats(h, r) for h, r in zip(hyps_sub, refs)]
    rows = []
    acc = [np.zeros(4, np.int64), np.zeros(4, np.int64), 0, 0,
           np.zeros(4, np.int64), np.zeros(4, np.int64), 0, 0]
    for rank, i in enumerate(order, start=1):
        mt, tt, hl, rl = stats_t[i]
        acc[0] = acc[0] + mt
        acc[1] = acc[1] + tt
        acc[2] += hl
        acc[3] += rl
        ms, ts, hls, rls = stats_s[i]
        acc[4] = acc[4] + ms
        acc[5] = acc[5] + ts
        acc[6] += hls
        acc[7] += rls
        rows.append(CurveRow(
            rank=rank, score_diff=float(score_diffs[i]),
            cum_bleu_true=bleu_from_stats(acc[0], acc[1], acc[2], acc[3], smooth),
            cum_bleu_sub=bleu_from_stats(acc[4], acc[5], acc[6], acc[7], smooth),
            index=int(i)))
    return rows


def quartile_gaps(score_diffs, hyps_true, hyps_sub, refs, smooth=False):
    """BLEU_true - BLEU_sub within each quartile of the score-diff ordering.

    Quartile 0 holds the largest score differences. Returns four gaps.
    """
    order = np.argsort(-np.asarray(score_diffs, dtype=np.float64), kind="stable")
    gaps = []
    for part in np.array_split(order, 4):
        if len(part) == 0:
            gaps.append(0.0)
            continue
        bt = corpus_bleu([hyps_true[i] for i in part], [refs[i] for i in part],
                         smooth=smooth)
        bs = corpus_bleu([hyps_sub[i] for i in part], [refs[i] for i in part],
                         smooth=smooth)
        gaps.append(bt - bs)
    return gaps


# ---------------------------------------------------------------------------
# task-specific accuracy


def ambiguous_position_accuracy(hyps, refs, lexicon):
    """Exact-match accuracy at reference positions holding an ambiguous
    target form; hypotheses shorter than the position count as wrong."""
    correct = total = 0
    for hyp, ref in zip(hyps, refs):
        for pos, tok in enumerate(ref):
            if lexicon.is_ambiguous_target(tok):
                total += 1
                if pos < len(hyp) and hyp[pos] == tok:
                    correct += 1
    if total == 0:
        raise EvalError("no ambiguous target positions in the references")
    return correct / total


# ---------------------------------------------------------------------------
# report plumbing


def format_eval_report(fields, table_header, table_rows):
    """Key/value block, blank line, then a tab-separated table."""
    lines = [f"{k}\t{v}" for k, v in fields.items()]
    lines.append("")
    lines.append("\t".join(table_header))
    for row in table_rows:
        lines.append("\t".join(str(c) for c in row))
    return "\n".join(lines) + "\n"


def write_eval_report(path, fields, table_header, table_rows):
    with open(path, "w") as f:
        f.write(format_eval_report(fields, table_header, table_rows))
