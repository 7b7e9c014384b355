"""Token / sentence / data-level scores and the context-less estimator.

Score definitions (teacher-forced, reference target Y):

    s_tok(n, t) = log p(y_t | y_<t, X_n, C)        per target position
    s_sent(n)   = sum_t s_tok(n, t)                per sentence
    s_data      = sum_n s_sent(n)                  per batch

The context-less score substitutes mismatched contexts: with M = 1 it
uses the batch's derangement permutation; with M > 1 it draws M distinct
derangements and combines per-position probabilities with a log-mean-exp.

Sums are pinned: within a sentence positions are added left to right,
across the batch sentences are added in row order, in float64 Python
scalars. Tests recompute the same order and require bit equality, so do
not "optimize" these loops into vectorized reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad


class ScoringError(ValueError):
    pass


def token_scores(logp, batch):
    """Gather reference-token log-probs: (B, Ly-1, V) -> (B, T) Tensor.

    PAD positions are zeroed. Keeps the gradient link for training.
    """
    refs = batch.Y[:, 1:]
    mask = batch.y_mask[:, 1:]
    gathered = ad.gather_last(logp, np.where(mask, refs, 0))
    return ad.mul(gathered, ad.Tensor(mask.astype(logp.dtype)))


def sentence_scores(tok, lengths):
    """Pinned left-to-right per-sentence sums, float64 (B,)."""
    tok = np.asarray(tok, dtype=np.float64)
    out = np.empty(len(lengths), dtype=np.float64)
    for n, T in enumerate(lengths):
        acc = 0.0
        for t in range(int(T)):
            acc += float(tok[n, t])
        out[n] = acc
    return out


def data_score(sent):
    """Pinned row-order sum of sentence scores, float64 scalar."""
    acc = 0.0
    for v in sent:
        acc += float(v)
    return acc


def subfactorial(n):
    """Number of derangements of n items."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return 1
    d_prev, d = 1, 0  # D(0), D(1)
    for k in range(2, n + 1):
        d_prev, d = d, (k - 1) * (d + d_prev)
    return d if n > 1 else 0


def log_mean_exp(samples):
    """Combine along axis 0, order-invariant and overflow-free for v <= 0.

    Inputs are sorted first so any permutation of the samples produces
    bit-identical output; the max is subtracted so exp never overflows
    (for log-probabilities everything is <= 0 anyway).
    """
    v = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    top = v[-1]
    return top + np.log(np.mean(np.exp(v - top), axis=0))


@dataclass
class ContextLessEstimate:
    tok: np.ndarray  # (B, T) float64 per-position estimates, PAD zero
    M: int
    perms: tuple  # the derangements used


def _token_array(model, batch, choice):
    logp = model.forward_batch(batch, choice, train=False)
    return token_scores(logp, batch).data.astype(np.float64)


def contextless_scores(model, batch, M=1, seed=None):
    """Estimate per-position log-probs without the true context.

    M = 1 reuses the batch's own derangement (the training-time
    instantiation). M > 1 draws M *distinct* derangements seeded by
    ``seed`` and averages probabilities per position.
    """
    if M < 1:
        raise ScoringError(f"M must be >= 1, got {M}")
    if batch.size < 2 or not batch.has_derangement:
        raise ScoringError("context-less scores need a batch of size >= 2 "
                           "(no derangement exists for a single example)")
    if M == 1:
        return ContextLessEstimate(tok=_token_array(model, batch, "shuffled"),
                                   M=1, perms=(tuple(int(i) for i in batch.perm),))

    available = subfactorial(batch.size)
    if M > available:
        raise ScoringError(
            f"M={M} exceeds the {available} distinct derangements of {batch.size} rows")
    rng = np.random.default_rng(seed)
    perms = []
    seen = set()
    base = np.arange(batch.size)
    while len(perms) < M:
        p = rng.permutation(batch.size)
        key = tuple(int(i) for i in p)
        if key in seen or np.any(p == base):
            continue
        seen.add(key)
        perms.append(key)
    samples = []
    for key in perms:
        b = replace(batch, perm=np.asarray(key, dtype=np.int64))
        samples.append(_token_array(model, b, "shuffled"))
    return ContextLessEstimate(tok=log_mean_exp(np.stack(samples)), M=M,
                               perms=tuple(perms))


@dataclass
class ScoreBundle:
    """All three score levels under the true and substituted contexts."""

    tok_true: np.ndarray
    tok_sub: np.ndarray
    sent_true: np.ndarray
    sent_sub: np.ndarray
    data_true: float
    data_sub: float
    lengths: np.ndarray
    M: int

    def validate(self):
        if np.any(self.tok_true > 0) or np.any(self.tok_sub > 0):
            raise ScoringError("scores must be <= 0 (log-probabilities)")
        return self


def score_batch(model, batch, M=1, seed=None):
    """Evaluate both pathways and assemble a ScoreBundle (eval mode)."""
    tok_true = _token_array(model, batch, "true")
    est = contextless_scores(model, batch, M=M, seed=seed)
    sent_true = sentence_scores(tok_true, batch.lengths)
    sent_sub = sentence_scores(est.tok, batch.lengths)
    return ScoreBundle(
        tok_true=tok_true, tok_sub=est.tok,
        sent_true=sent_true, sent_sub=sent_sub,
        data_true=data_score(sent_true), data_sub=data_score(sent_sub),
        lengths=np.asarray(batch.lengths), M=M).validate()


def write_score_dump(path, lengths, sent_true, sent_sub):
    """One line per sentence: index, T_n, s_sent true, s_sent context-less."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, (T, st, ss) in enumerate(zip(lengths, sent_true, sent_sub)):
            fh.write(f"{i}\t{int(T)}\t{st:.17g}\t{ss:.17g}\n")


def read_score_dump(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            i, T, st, ss = line.rstrip("\n").split("\t")
            rows.append((int(i), int(T), float(st), float(ss)))
    return rows
