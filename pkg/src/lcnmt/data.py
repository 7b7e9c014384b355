"""Synthetic context-dependent corpus, vocabulary, batching, corpus I/O.

The task is built so that "useful context" is ground truth rather than a
hope: most source tokens translate through a fixed bijective lexicon
(``s7 -> t7``), but *ambiguous* source tokens (``a2``) have two target
forms (``a2x`` / ``a2y``) and the correct form is determined solely by a
marker token (``m0``, ``m1``, ...) placed in the context sentence. A
model that reads the context can be perfect; one that ignores it cannot
beat chance on ambiguous positions.

Corpus file format: UTF-8, one triplet per line, three tab-separated
fields — context tokens, source tokens, target tokens — each field
space-separated. Targets are stored without BOS/EOS; they are added on
read. Vocabulary file: one token per line, line number = id, first four
lines fixed to PAD BOS EOS UNK.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RESERVED = ("PAD", "BOS", "EOS", "UNK")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class VocabularyError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


class Vocabulary:
    """Bijection between token strings and contiguous ids, 0..3 reserved."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if tokens[:4] != RESERVED:
            raise VocabularyError(f"first four tokens must be {RESERVED}, got {tokens[:4]}")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise VocabularyError("duplicate token in vocabulary")

    @classmethod
    def from_items(cls, extra_tokens):
        return cls(RESERVED + tuple(extra_tokens))

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def token_id(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def id_token(self, i):
        return self._tokens[i]

    def encode(self, tokens):
        return tuple(self.token_id(t) for t in tokens)

    def decode(self, ids):
        return tuple(self._tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass(frozen=True)
class TranslationTriplet:
    """One training example: source X, target Y (BOS..EOS), context C."""

    source: tuple
    target: tuple
    context: tuple

    def __post_init__(self):
        if len(self.target) < 3 or self.target[0] != BOS_ID or self.target[-1] != EOS_ID:
            raise ValueError("target must be BOS, >=1 token, EOS")
        if len(self.source) == 0:
            raise ValueError("source must be non-empty")

    @property
    def T(self):
        # number of predicted tokens (content + EOS), excludes BOS
        return len(self.target) - 1


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of the synthetic disambiguation task.

    vocab_size is a budget: 4 reserved ids + a bijective lexicon (source
    and target halves) + 3 ids per ambiguous type (source token and its
    two target forms) + the marker tokens must fit inside it.
    """

    vocab_size: int = 64
    n_ambiguous: int = 4
    n_markers: int = 2
    len_range: tuple = (3, 7)
    sizes: tuple = (1000, 100, 100)
    ambiguous_rate: float = 0.35
    seed: int = 13

    def validate(self):
        if self.n_markers < 2 or self.n_markers % 2 != 0:
            raise ValueError("n_markers must be even and >= 2 (keeps both target "
                             "forms equally likely a priori)")
        if self.n_ambiguous < 0:
            raise ValueError("n_ambiguous must be >= 0")
        if not (1 <= self.len_range[0] <= self.len_range[1]):
            raise ValueError(f"bad len_range {self.len_range}")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"split sizes must be >= 1, got {self.sizes}")
        if not (0.0 <= self.ambiguous_rate <= 1.0):
            raise ValueError(f"bad ambiguous_rate {self.ambiguous_rate}")
        if self.n_plain < 1:
            raise VocabularyError(
                f"vocab_size={self.vocab_size} too small to host {self.n_markers} markers, "
                f"{self.n_ambiguous} ambiguous pairs and a non-empty lexicon")

    @property
    def n_plain(self):
        budget = self.vocab_size - len(RESERVED) - 3 * self.n_ambiguous - self.n_markers
        return budget // 2


class TaskLexicon:
    """Token tables derived from a SyntheticTaskSpec (id layout is fixed)."""

    def __init__(self, spec: SyntheticTaskSpec):
        spec.validate()
        self.spec = spec
        p, a, k = spec.n_plain, spec.n_ambiguous, spec.n_markers
        self.plain_src = [f"s{i}" for i in range(p)]
        self.plain_tgt = [f"t{i}" for i in range(p)]
        self.amb_src = [f"a{j}" for j in range(a)]
        self.amb_forms = [(f"a{j}x", f"a{j}y") for j in range(a)]
        self.markers = [f"m{i}" for i in range(k)]
        tokens = list(self.plain_src) + list(self.plain_tgt)
        for j in range(a):
            tokens.append(self.amb_src[j])
            tokens.extend(self.amb_forms[j])
        tokens.extend(self.markers)
        self.vocab = Vocabulary.from_items(tokens)

        self._src2tgt = {self.vocab.token_id(s): self.vocab.token_id(t)
                         for s, t in zip(self.plain_src, self.plain_tgt)}
        self._amb2forms = {self.vocab.token_id(self.amb_src[j]):
                           tuple(self.vocab.token_id(f) for f in self.amb_forms[j])
                           for j in range(a)}
        self._marker_ids = {self.vocab.token_id(m): i for i, m in enumerate(self.markers)}
        self._form_tokens = {fid for forms in self._amb2forms.values() for fid in forms}

    @staticmethod
    def marker_form(marker_index):
        return marker_index % 2

    def is_ambiguous_source(self, token_id):
        return token_id in self._amb2forms

    def is_ambiguous_target(self, token_id):
        return token_id in self._form_tokens

    def find_marker(self, context_ids):
        hits = [self._marker_ids[t] for t in context_ids if t in self._marker_ids]
        if len(hits) != 1:
            raise ValueError(f"expected exactly one marker in context, found {len(hits)}")
        return hits[0]

    def translate(self, source_ids, form):
        """Apply the lexicon; ambiguous tokens resolve to the given form (0/1)."""
        out = []
        for t in source_ids:
            if t in self._amb2forms:
                out.append(self._amb2forms[t][form])
            else:
                out.append(self._src2tgt[t])
        return tuple(out)

    def oracle_translate(self, source_ids, context_ids):
        """Gold decoder: read the marker from C, resolve every source token."""
        form = self.marker_form(self.find_marker(context_ids))
        return self.translate(source_ids, form)


def context_blind_bayes_accuracy(spec: SyntheticTaskSpec):
    """Best achievable accuracy on ambiguous positions without reading C.

    Enumerates the marker sampling rule: markers are uniform and the form
    is marker % 2, so the majority form's probability is the answer.
    """
    forms = [TaskLexicon.marker_form(k) for k in range(spec.n_markers)]
    p1 = sum(forms) / len(forms)
    return max(p1, 1.0 - p1)


def generate_corpus(spec: SyntheticTaskSpec):
    """Deterministically sample disjoint (train, valid, test) triplet lists."""
    lex = TaskLexicon(spec)
    vocab = lex.vocab
    rng = np.random.default_rng(spec.seed)
    p, a, k = spec.n_plain, spec.n_ambiguous, spec.n_markers
    plain_ids = np.array([vocab.token_id(t) for t in lex.plain_src], dtype=np.int64)
    amb_ids = np.array([vocab.token_id(t) for t in lex.amb_src], dtype=np.int64)
    marker_ids = np.array([vocab.token_id(m) for m in lex.markers], dtype=np.int64)

    n_total = sum(spec.sizes)
    lo, hi = spec.len_range
    seen = set()
    triplets = []
    attempts = 0
    max_attempts = 200 * n_total + 1000
    while len(triplets) < n_total:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not sample {n_total} distinct triplets (task space too small "
                f"for spec {spec}); got {len(triplets)}")

        ls = int(rng.integers(lo, hi + 1))
        src = plain_ids[rng.integers(0, p, size=ls)]
        if a > 0:
            amb_flags = rng.random(ls) < spec.ambiguous_rate
            amb_choice = amb_ids[rng.integers(0, a, size=ls)]
            if not amb_flags.any():
                amb_flags[int(rng.integers(0, ls))] = True
            src = np.where(amb_flags, amb_choice, src)
        marker = int(rng.integers(0, k))

        lc = int(rng.integers(lo, hi + 1))
        ctx = plain_ids[rng.integers(0, p, size=lc)]
        ctx[int(rng.integers(0, lc))] = marker_ids[marker]

        src_t = tuple(int(t) for t in src)
        ctx_t = tuple(int(t) for t in ctx)
        key = (ctx_t, src_t)
        if key in seen:
            continue
        seen.add(key)
        tgt = lex.translate(src_t, lex.marker_form(marker))
        triplets.append(TranslationTriplet(
            source=src_t, target=(BOS_ID,) + tgt + (EOS_ID,), context=ctx_t))

    n_tr, n_va, n_te = spec.sizes
    train = triplets[:n_tr]
    valid = triplets[n_tr:n_tr + n_va]
    test = triplets[n_tr + n_va:]
    return train, valid, test


# ---------------------------------------------------------------------------
# batching


@dataclass
class PaddedBatch:
    """Padded id matrices plus masks, lengths, and the context permutation.

    ``perm`` maps example row n to the row whose context substitutes C_n
    when scoring under a mismatched context; it is a derangement whenever
    the batch has >= 2 rows (``has_derangement``), else the identity.
    """

    X: np.ndarray
    Y: np.ndarray
    C: np.ndarray
    x_mask: np.ndarray
    y_mask: np.ndarray
    c_mask: np.ndarray
    lengths: np.ndarray
    perm: np.ndarray
    has_derangement: bool
    indices: np.ndarray = field(default=None)  # positions in the source dataset

    @property
    def size(self):
        return self.X.shape[0]


def _pad_rows(rows):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, out != PAD_ID


def sample_derangement(n, rng):
    """Uniform permutation conditioned on no fixed points (rejection sampling)."""
    if n < 2:
        return np.arange(n, dtype=np.int64), False
    while True:
        perm = rng.permutation(n).astype(np.int64)
        if not np.any(perm == np.arange(n)):
            return perm, True


def make_eval_batches(data, batch_size):
    """Batch a dataset in its given order, no shuffling, identity perms.

    Used for scoring and decoding, where the caller handles any context
    substitution at corpus scope before batching.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    batches = []
    for start in range(0, len(data), batch_size):
        rows = data[start:start + batch_size]
        X, x_mask = _pad_rows([t.source for t in rows])
        Y, y_mask = _pad_rows([t.target for t in rows])
        C, c_mask = _pad_rows([t.context for t in rows])
        batches.append(PaddedBatch(
            X=X, Y=Y, C=C, x_mask=x_mask, y_mask=y_mask, c_mask=c_mask,
            lengths=np.array([t.T for t in rows], dtype=np.int64),
            perm=np.arange(len(rows), dtype=np.int64), has_derangement=False,
            indices=np.arange(start, start + len(rows), dtype=np.int64)))
    return batches


def make_batches(data, batch_size, seed):
    """Batch one epoch: shuffle, bucket by source length, group sequentially.

    Every example appears exactly once; each batch carries its own context
    derangement. The bucket sort is stable so the shuffled order breaks
    ties, and the final batch order is itself shuffled so length does not
    correlate with training step.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not data:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    order = sorted(order, key=lambda i: len(data[i].source))  # stable
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    group_order = rng.permutation(len(groups))

    batches = []
    for gi in group_order:
        idx = groups[gi]
        rows = [data[i] for i in idx]
        X, x_mask = _pad_rows([t.source for t in rows])
        Y, y_mask = _pad_rows([t.target for t in rows])
        C, c_mask = _pad_rows([t.context for t in rows])
        lengths = np.array([t.T for t in rows], dtype=np.int64)
        perm, has_der = sample_derangement(len(rows), rng)
        batches.append(PaddedBatch(
            X=X, Y=Y, C=C, x_mask=x_mask, y_mask=y_mask, c_mask=c_mask,
            lengths=lengths, perm=perm, has_derangement=has_der,
            indices=np.array(idx, dtype=np.int64)))
    return batches


# ---------------------------------------------------------------------------
# corpus I/O


def write_corpus(data, path, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for t in data:
            ctx = " ".join(vocab.decode(t.context))
            src = " ".join(vocab.decode(t.source))
            tgt = " ".join(vocab.decode(t.target[1:-1]))  # strip BOS/EOS
            fh.write(f"{ctx}\t{src}\t{tgt}\n")


def read_corpus(path, vocab):
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line == "":
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            ctx_s, src_s, tgt_s = fields
            try:
                ctx = vocab.encode(ctx_s.split()) if ctx_s.strip() else ()
                src = vocab.encode(src_s.split())
                tgt = vocab.encode(tgt_s.split())
            except VocabularyError as e:
                raise CorpusFormatError(f"{path}:{lineno}: {e}") from None
            if not src or not tgt:
                raise CorpusFormatError(f"{path}:{lineno}: empty source or target field")
            triplets.append(TranslationTriplet(
                source=src, target=(BOS_ID,) + tgt + (EOS_ID,), context=ctx))
    return triplets
