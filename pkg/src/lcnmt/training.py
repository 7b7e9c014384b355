"""Adam training with plateau learning-rate halving and the a/b/c/d variants.

The learning rate is a pure function of the dev-BLEU history: it halves
whenever the last `patience` evaluations each failed to exceed the best
score seen before them (ties count as no improvement, the running best
never resets), and the stagnation counter resets after each halving.
Training stops after `max_epochs` epochs or `max_halvings` halvings,
whichever comes first.

Determinism: batch order is reseeded per epoch from (seed, epoch) and
dropout per step from (seed, epoch, step), so a checkpoint taken at any
evaluation point resumes with bitwise-identical continuation.
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import evaluation as E
from .checkpoint import load_checkpoint, save_checkpoint
from .data import make_batches, make_eval_batches
from .loss import RegConfig, total_loss
from .model import Model, ModelConfig

log = logging.getLogger(__name__)

VARIANTS = ("a", "b", "c", "d")


class OptimError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   t=0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. grads maps name -> ndarray."""
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient in parameter '{name}'")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads, max_norm, order):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    A non-positive max_norm disables clipping. Returns the pre-clip norm.
    The reduction runs in float64 over `order` to stay deterministic.
    """
    sq = 0.0
    for name in order:
        g = grads[name]
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in order:
            g = grads[name]
            g *= g.dtype.type(factor)
    return norm


# ---------------------------------------------------------------------------
# learning-rate schedule


def _schedule_replay(history, lr, patience, factor):
    best = float("-inf")
    stagnant = 0
    halvings = 0
    for bleu in history:
        if bleu > best:
            best = bleu
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= patience:
                lr *= factor
                halvings += 1
                stagnant = 0
    return lr, halvings


def lr_schedule(history, lr, patience=5, factor=0.5):
    """Learning rate after replaying the plateau rule over a BLEU history.

    `history` is ordered oldest to newest and `lr` is the initial rate; the
    result depends on nothing else, so the caller can recompute it from the
    full history at every evaluation.
    """
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    return _schedule_replay(history, lr, patience, factor)[0]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    reg: RegConfig = field(default_factory=RegConfig)
    variant: str = "d"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 10
    evals_per_epoch: int = 2
    patience: int = 5
    halve_factor: float = 0.5
    max_halvings: int = 6
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.reg.validate()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, "
                             f"got {self.variant!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.evals_per_epoch < 1:
            raise ValueError("evals_per_epoch must be >= 1, "
                             f"got {self.evals_per_epoch}")
        if not 0 < self.halve_factor < 1:
            raise ValueError("halve_factor must be in (0, 1), "
                             f"got {self.halve_factor}")
        if self.max_halvings < 0:
            raise ValueError(f"max_halvings must be >= 0, got {self.max_halvings}")
        expected = variant_context_mode(self.variant)
        if self.model.context_mode != expected:
            raise ValueError(
                f"variant {self.variant!r} needs context_mode {expected!r}, "
                f"got {self.model.context_mode!r}")
        return self


def variant_context_mode(variant):
    return "context-blind" if variant == "a" else "larger-context"


def variant_reg(cfg: TrainConfig):
    """Variant d trains with the context regularizer; a/b/c with plain NLL."""
    if cfg.variant == "d":
        return cfg.reg
    return replace(cfg.reg, alpha_data=0.0, alpha_sent=0.0, alpha_token=0.0)


def deranged_batch(batch):
    """Variant b's view of a batch: every row gets its deranged context."""
    return replace(batch, C=batch.C[batch.perm], c_mask=batch.c_mask[batch.perm])


LOG_HEADER = ("step", "epoch", "nll", "reg_data", "reg_sent", "reg_tok",
              "total", "lr", "grad_norm", "dev_bleu", "dev_delta")


@dataclass
class TrainResult:
    best_bleu: float
    best_path: str
    final_lr: float
    n_steps: int
    bleu_history: list
    delta_history: list
    stop_reason: str
    log_path: str


# ---------------------------------------------------------------------------
# dev evaluation during training


def _dev_scores(model, dev_data, cfg: TrainConfig, max_len, eval_idx):
    """Greedy dev BLEU plus the raw score delta, per the variant's contract.

    Variant b is evaluated in its operating condition (deranged contexts,
    reseeded per evaluation); its delta is 0 by convention since the model
    never sees matched contexts. Variant a's delta is identically 0, so
    neither needs the substitution passes.
    """
    refs = [E.strip_eos(t.target) for t in dev_data]
    data = dev_data
    if cfg.variant == "b":
        perm = E.corpus_derangement(len(dev_data), (cfg.seed, 4, eval_idx))
        data = E.substitute_contexts(dev_data, perm)
    hyps = []
    for batch in make_eval_batches(data, cfg.batch_size):
        hyps.extend(h.tokens for h in E.greedy_decode_batch(model, batch, max_len))
    bleu = E.corpus_bleu([E.strip_eos(h) for h in hyps], refs)
    if cfg.variant in ("a", "b"):
        return bleu, 0.0
    # intrinsic_delta draws derangements at seed+m, so hand it an integer
    sub_seed = int(np.random.default_rng((cfg.seed, 5, eval_idx)).integers(2 ** 31))
    delta = E.intrinsic_delta(model, dev_data, m_samples=1, seed=sub_seed,
                              batch_size=cfg.batch_size)
    return bleu, delta.per_token


def _eval_marks(n_batches, evals_per_epoch):
    """1-based batch indices at/after each evenly spaced epoch fraction."""
    marks = sorted({min(math.ceil(n_batches * k / evals_per_epoch), n_batches)
                    for k in range(1, evals_per_epoch + 1)})
    return marks


# ---------------------------------------------------------------------------
# the loop


def _fmt(x):
    return "%.17g" % x


def train(cfg: TrainConfig, train_data, dev_data, out_dir,
          resume_from=None, dev_max_len=None):
    """Train one variant; returns a TrainResult. Artifacts in out_dir:
    best.ckpt (best dev BLEU so far) and train_log.tsv (one row per step)."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "train_log.tsv")
    if dev_max_len is None:
        dev_max_len = max(t.T for t in dev_data) + 8
    reg = variant_reg(cfg)

    model = Model(cfg.model, np.random.default_rng((cfg.seed, 0)))
    state = AdamState.init(model.params)
    bleu_history = []
    delta_history = []
    best = float("-inf")
    global_step = 0
    start_epoch = 0
    skip_batches = 0
    log_mode = "w"

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.set_param_arrays(ckpt["params"])
        ts = ckpt["train_state"]
        for name in state.m:
            state.m[name] = ckpt["moments"][name][0]
            state.v[name] = ckpt["moments"][name][1]
        state.t = ts["adam_t"]
        bleu_history = list(ts["bleu_history"])
        delta_history = list(ts["delta_history"])
        best = ts["best_bleu"]
        global_step = ts["step"]
        start_epoch = ts["epoch"]
        skip_batches = ts["batch_idx"]  # batches already consumed this epoch
        log_mode = "a"

    lr = lr_schedule(bleu_history, cfg.lr, cfg.patience, cfg.halve_factor)
    stop_reason = "max_epochs"
    logf = open(log_path, log_mode)
    try:
        if log_mode == "w":
            logf.write("\t".join(LOG_HEADER) + "\n")
        for epoch in range(start_epoch, cfg.max_epochs):
            batches = make_batches(train_data, cfg.batch_size,
                                   np.random.default_rng((cfg.seed, 2, epoch)))
            marks = _eval_marks(len(batches), cfg.evals_per_epoch)
            first = skip_batches
            skip_batches = 0
            stop = False
            for i in range(first, len(batches)):
                batch = batches[i]
                if cfg.variant == "b":
                    batch = deranged_batch(batch)
                rng_drop = np.random.default_rng((cfg.seed, 3, epoch, i))
                with ad.Tape() as tape:
                    total_t, bd = total_loss(model, batch, reg,
                                             train=True, rng=rng_drop)
                if not math.isfinite(bd.total):
                    raise DivergenceError(
                        f"non-finite loss {bd.total} at step {global_step + 1}; "
                        f"best checkpoint retained at {best_path}")
                tensor_grads = tape.backward(total_t)
                grads = {name: tensor_grads[p]
                         for name, p in model.params.items()}
                gnorm = clip_global_norm(grads, cfg.clip_norm, list(model.params))
                adam_step(model.params, grads, state, lr,
                          cfg.beta1, cfg.beta2, cfg.eps)
                global_step += 1
                epoch_frac = epoch + (i + 1) / len(batches)
                row = [str(global_step), "%.6f" % epoch_frac, _fmt(bd.nll),
                       _fmt(bd.reg_data), _fmt(bd.reg_sent), _fmt(bd.reg_tok),
                       _fmt(bd.total), _fmt(lr), _fmt(gnorm), "", ""]
                if (i + 1) in marks:
                    bleu, delta = _dev_scores(model, dev_data, cfg, dev_max_len,
                                              eval_idx=len(bleu_history))
                    bleu_history.append(bleu)
                    delta_history.append(delta)
                    row[-2] = _fmt(bleu)
                    row[-1] = _fmt(delta)
                    if bleu > best:
                        best = bleu
                        _save(best_path, cfg, model, state, bleu_history,
                              delta_history, best, global_step, epoch, i + 1)
                    lr, halvings = _schedule_replay(
                        bleu_history, cfg.lr, cfg.patience, cfg.halve_factor)
                    if halvings >= cfg.max_halvings:
                        stop_reason = "max_halvings"
                        stop = True
                logf.write("\t".join(row) + "\n")
                if stop:
                    break
            if stop:
                break
    finally:
        logf.close()
    if not os.path.exists(best_path):
        _save(best_path, cfg, model, state, bleu_history, delta_history,
              best, global_step, cfg.max_epochs, 0)
    return TrainResult(best_bleu=best, best_path=best_path, final_lr=lr,
                       n_steps=global_step, bleu_history=bleu_history,
                       delta_history=delta_history, stop_reason=stop_reason,
                       log_path=log_path)


def _save(path, cfg, model, state, bleu_history, delta_history,
          best, step, epoch, batch_idx):
    save_checkpoint(
        path,
        config=cfg.model.to_dict(),
        param_arrays={name: p.data for name, p in model.params.items()},
        moments={name: (state.m[name], state.v[name]) for name in state.m},
        train_state={"adam_t": state.t, "step": step, "epoch": epoch,
                     "batch_idx": batch_idx, "best_bleu": best,
                     "bleu_history": bleu_history,
                     "delta_history": delta_history},
        extras={"variant": cfg.variant})


def load_model(path, dtype=np.float32):
    """Rebuild a Model from a checkpoint (evaluation entry point)."""
    ckpt = load_checkpoint(path)
    config = ModelConfig.from_dict(ckpt["config"])
    model = Model(config, np.random.default_rng(0), dtype=dtype)
    model.set_param_arrays(ckpt["params"])
    return model, ckpt
