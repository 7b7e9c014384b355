"""Gated larger-context transformer and its context-blind baseline.

Architecture (widths d, H heads, L layers, post-norm throughout):

* one shared token embedding matrix E serves the context encoder, the
  source encoder, the decoder input, and the output projection
  (logits = h @ E^T, no bias);
* a single shared transformer encoder maps both the context sentence C
  and the source sentence X to per-position vectors c and x;
* the merge block attends from source positions into the context,
  ``x_hat_c = MHA(q=x; k,v=c)``, computes an elementwise gate
  ``g = Linear([x; x_hat_c])`` (left unbounded by default; a sigmoid
  variant is available via config), and produces
  ``x_c = LayerNorm(FF(g * Dropout(x_hat_c) + (1 - g) * x))`` — note
  there is deliberately no residual around this FF;
* a standard autoregressive decoder (causal self-attention, cross
  attention into x_c, FF) emits log-probabilities over the vocabulary.

The context-blind variant has no merge block and never reads C: the
decoder cross-attends directly into x. With the unbounded gate and the
gate parameters zeroed, the larger-context model's outputs are exactly
(value-for-value) independent of C: g is the zero matrix, 0 * x_hat_c
contributes nothing, and masked attention uses a finite fill whose
exp underflows to exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .data import BOS_ID

CONTEXT_MODES = ("larger-context", "context-blind")
GATE_MODES = ("unbounded", "sigmoid")
CONTEXT_CHOICES = ("true", "shuffled", "none")


class ModeError(ValueError):
    """Requested context pathway that the configured model cannot provide."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    gate_mode: str = "unbounded"
    context_mode: str = "larger-context"

    def validate(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4 (reserved ids), got {self.vocab_size}")
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be >= 1, got {self.d_ff}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(
                f"context_mode must be one of {CONTEXT_MODES}, got {self.context_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    @property
    def uses_context(self):
        return self.context_mode == "larger-context"


def positional_encoding(length, d_model, dtype):
    """Fixed sinusoidal table, shape (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


class Model:
    """Parameter container plus forward passes; training lives elsewhere."""

    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        self._init_params(rng)

    # ------------------------------------------------------------------
    # parameters

    def _add(self, name, array):
        self.params[name] = ad.Tensor(array.astype(self.dtype), requires_grad=True,
                                      name=name)

    def _xavier(self, rng, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    def _init_linear(self, rng, name, fan_in, fan_out):
        self._add(f"{name}.w", self._xavier(rng, fan_in, fan_out))
        self._add(f"{name}.b", np.zeros(fan_out))

    def _init_mha(self, rng, name):
        d = self.config.d_model
        for part in ("q", "k", "v", "o"):
            self._init_linear(rng, f"{name}.{part}", d, d)

    def _init_ln(self, name):
        d = self.config.d_model
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _init_ff(self, rng, name):
        self._init_linear(rng, f"{name}.1", self.config.d_model, self.config.d_ff)
        self._init_linear(rng, f"{name}.2", self.config.d_ff, self.config.d_model)

    def _init_params(self, rng):
        cfg = self.config
        self._add("embed", rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model),
                                      size=(cfg.vocab_size, cfg.d_model)))
        for i in range(cfg.n_layers):
            self._init_mha(rng, f"enc.{i}.attn")
            self._init_ln(f"enc.{i}.ln1")
            self._init_ff(rng, f"enc.{i}.ff")
            self._init_ln(f"enc.{i}.ln2")
        if cfg.uses_context:
            self._init_mha(rng, "merge.attn")
            self._init_linear(rng, "merge.gate", 2 * cfg.d_model, cfg.d_model)
            self._init_ff(rng, "merge.ff")
            self._init_ln("merge.ln")
        for i in range(cfg.n_layers):
            self._init_mha(rng, f"dec.{i}.self")
            self._init_ln(f"dec.{i}.ln1")
            self._init_mha(rng, f"dec.{i}.cross")
            self._init_ln(f"dec.{i}.ln2")
            self._init_ff(rng, f"dec.{i}.ff")
            self._init_ln(f"dec.{i}.ln3")

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def zero_gate(self):
        """Zero the gate layer: the model then provably ignores C."""
        if not self.config.uses_context:
            raise ModeError("context-blind model has no gate")
        self.params["merge.gate.w"].data[:] = 0.0
        self.params["merge.gate.b"].data[:] = 0.0

    def set_param_arrays(self, arrays):
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)}, "
                           f"unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            t = self.params[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr.astype(self.dtype))

    # ------------------------------------------------------------------
    # building blocks

    def _linear(self, name, x):
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, name, x):
        return ad.add(ad.mul(ad.layer_norm(x), self.params[f"{name}.g"]),
                      self.params[f"{name}.b"])

    def _ff(self, name, x):
        return self._linear(f"{name}.2", ad.relu(self._linear(f"{name}.1", x)))

    def _dropout(self, x, train, rng):
        return ad.dropout(x, self.config.dropout, rng=rng, train=train)

    def _mha(self, name, q_in, kv_in, key_mask, causal, train, rng):
        """Multi-head attention; key_mask marks valid key positions (B, Lk)."""
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        q = self._linear(f"{name}.q", q_in)
        k = self._linear(f"{name}.k", kv_in)
        v = self._linear(f"{name}.v", kv_in)
        lq, lk = q.shape[-2], k.shape[-2]

        invalid = ~np.asarray(key_mask, dtype=bool)[:, None, :]
        if causal:
            future = np.triu(np.ones((lq, lk), dtype=bool), k=1)
            invalid = invalid | future[None, :, :]

        heads = []
        for qh, kh, vh in zip(ad.split_last(q, cfg.n_heads),
                              ad.split_last(k, cfg.n_heads),
                              ad.split_last(v, cfg.n_heads)):
            logits = ad.scale(ad.matmul(qh, ad.transpose_last_two(kh)),
                              1.0 / math.sqrt(dh))
            logits = ad.masked_fill(logits, invalid, ad.MASK_FILL)
            heads.append(ad.matmul(ad.softmax(logits), vh))
        return self._linear(f"{name}.o", ad.concat_last(heads))

    def _embed(self, ids, train, rng):
        cfg = self.config
        e = ad.scale(ad.embedding(self.params["embed"], ids), math.sqrt(cfg.d_model))
        pe = ad.Tensor(positional_encoding(ids.shape[-1], cfg.d_model, self.dtype))
        return self._dropout(ad.add(e, pe), train, rng)

    # ------------------------------------------------------------------
    # forward passes

    def encode(self, ids, mask, train=False, rng=None):
        """Shared encoder over C or X: (B, L) ids -> (B, L, d)."""
        h = self._embed(ids, train, rng)
        for i in range(self.config.n_layers):
            att = self._mha(f"enc.{i}.attn", h, h, mask, False, train, rng)
            h = self._ln(f"enc.{i}.ln1", ad.add(h, self._dropout(att, train, rng)))
            ff = self._ff(f"enc.{i}.ff", h)
            h = self._ln(f"enc.{i}.ln2", ad.add(h, self._dropout(ff, train, rng)))
        return h

    def merge(self, x, c, c_mask, train=False, rng=None):
        """Gate context information into the source representation."""
        xc_hat = self._mha("merge.attn", x, c, c_mask, False, train, rng)
        g = self._linear("merge.gate", ad.concat_last([x, xc_hat]))
        if self.config.gate_mode == "sigmoid":
            g = ad.sigmoid(g)
        one = ad.Tensor(np.asarray(1.0, dtype=self.dtype))
        mixed = ad.add(ad.mul(g, self._dropout(xc_hat, train, rng)),
                       ad.mul(ad.sub(one, g), x))
        return self._ln("merge.ln", self._ff("merge.ff", mixed))

    def decode(self, y_in, x_c, src_mask, train=False, rng=None):
        """Teacher-forced decoder: (B, Ly) input ids -> (B, Ly, V) log-probs."""
        y_key_mask = np.asarray(y_in, dtype=np.int64) != 0  # PAD id
        y_key_mask[:, 0] = True  # BOS column is always a valid key
        h = self._embed(y_in, train, rng)
        for i in range(self.config.n_layers):
            att = self._mha(f"dec.{i}.self", h, h, y_key_mask, True, train, rng)
            h = self._ln(f"dec.{i}.ln1", ad.add(h, self._dropout(att, train, rng)))
            cross = self._mha(f"dec.{i}.cross", h, x_c, src_mask, False, train, rng)
            h = self._ln(f"dec.{i}.ln2", ad.add(h, self._dropout(cross, train, rng)))
            ff = self._ff(f"dec.{i}.ff", h)
            h = self._ln(f"dec.{i}.ln3", ad.add(h, self._dropout(ff, train, rng)))
        logits = ad.matmul(h, ad.transpose_last_two(self.params["embed"]))
        return ad.log_softmax(logits)

    @staticmethod
    def _context_with_sentinel(C, c_mask):
        """Rows with an empty context get a single BOS sentinel position."""
        if C.shape[1] == 0:
            B = C.shape[0]
            C = np.full((B, 1), BOS_ID, dtype=np.int64)
            return C, np.ones((B, 1), dtype=bool)
        empty = ~c_mask.any(axis=1)
        if empty.any():
            C = C.copy()
            c_mask = c_mask.copy()
            C[empty, 0] = BOS_ID
            c_mask[empty, 0] = True
        return C, c_mask

    def encode_merged(self, X, x_mask, C, c_mask, train=False, rng=None):
        """Source representation the decoder attends to (x_c, or x when blind)."""
        x = self.encode(X, x_mask, train, rng)
        if not self.config.uses_context:
            return x
        C, c_mask = self._context_with_sentinel(C, c_mask)
        c = self.encode(C, c_mask, train, rng)
        return self.merge(x, c, c_mask, train, rng)

    def forward_batch(self, batch, context_choice, train=False, rng=None):
        """Log-prob distributions for teacher-forced Y: (B, Ly-1, V) Tensor.

        context_choice: "true" uses each row's own context, "shuffled"
        substitutes contexts along the batch's derangement, "none" is the
        context-blind pathway and is refused on a larger-context model
        (its context-less score is *estimated* by substitution instead).
        """
        if context_choice not in CONTEXT_CHOICES:
            raise ValueError(f"context_choice must be one of {CONTEXT_CHOICES}")
        if context_choice == "none" and self.config.uses_context:
            raise ModeError(
                "context_choice='none' is unsupported on a larger-context model; "
                "use 'shuffled' to estimate context-less scores by substitution")
        if context_choice == "shuffled":
            C, c_mask = batch.C[batch.perm], batch.c_mask[batch.perm]
        else:
            C, c_mask = batch.C, batch.c_mask
        x_c = self.encode_merged(batch.X, batch.x_mask, C, c_mask, train, rng)
        return self.decode(batch.Y[:, :-1], x_c, batch.x_mask, train, rng)

    def decode_step(self, y_prefix, x_c, src_mask):
        """Next-token log-probs for each row (eval mode): (B, V) ndarray."""
        logp = self.decode(y_prefix, x_c, src_mask, train=False, rng=None)
        return logp.data[:, -1, :]
