"""Timing comparison of the two kernel backends (NumPy vs compiled).

Runs each hot kernel on attention- and vocab-shaped inputs, plus one
end-to-end training-step case (forward + backward of the combined loss on
a small batch), and prints per-case times and the compiled-over-NumPy
speedup. Usage:

    python3 benchmarks/bench_kernels.py [--repeat N] [--dtype float32]
"""

import argparse
import time

import numpy as np

import lcnmt.kernels as K
from lcnmt.data import SyntheticTaskSpec, generate_corpus, make_batches
from lcnmt.loss import RegConfig, total_loss
from lcnmt.model import Model, ModelConfig


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(dtype):
    rng = np.random.default_rng(0)

    def arr(*shape, scale=1.0):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    att = arr(8 * 4 * 64, 64)          # attention rows: B*h*T x T
    voc = arr(8 * 64, 2048)            # output rows: B*T x V
    y_att = None                       # filled lazily per backend
    ids = rng.integers(0, 2048, size=8 * 64)
    emb_grads = arr(8 * 64, 128)

    cases = []
    cases.append(("softmax_fwd  (2048x64)", lambda: K.softmax_fwd(att)))
    cases.append(("softmax_bwd  (2048x64)",
                  lambda: K.softmax_bwd(K.softmax_fwd(att), att)))
    cases.append(("log_softmax_fwd (512x2048)", lambda: K.log_softmax_fwd(voc)))
    cases.append(("log_softmax_bwd (512x2048)",
                  lambda: K.log_softmax_bwd(K.log_softmax_fwd(voc), voc)))
    cases.append(("layer_norm_fwd (512x2048)",
                  lambda: K.layer_norm_fwd(voc, 1e-5)))

    def ln_bwd():
        xhat, rstd = K.layer_norm_fwd(voc, 1e-5)
        K.layer_norm_bwd(xhat, rstd, voc)
    cases.append(("layer_norm_bwd (512x2048)", ln_bwd))

    def scatter():
        out = np.zeros((2048, 128), dtype=dtype)
        K.scatter_add_rows(out, ids, emb_grads)
    cases.append(("scatter_add (512 rows)", scatter))
    return cases


def train_step_case(dtype):
    spec = SyntheticTaskSpec(sizes=(64, 8, 8))
    train, _, _ = generate_corpus(spec)
    batch = make_batches(train, 16, seed=0)[0]
    model = Model(ModelConfig(vocab_size=64, n_layers=2, d_model=64,
                              n_heads=4, d_ff=128, dropout=0.0),
                  np.random.default_rng(0), dtype=dtype)
    reg = RegConfig()

    def step():
        total, _ = total_loss(model, batch, reg, train=False)
        total.backward()
    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"],
                    default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype).type

    backends = K.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; run pip install -e . first")

    rows = []
    cases = kernel_cases(dtype) + [("train step (loss fwd+bwd)",
                                    train_step_case(dtype))]
    for label, fn in cases:
        per = {}
        for name in backends:
            K.set_backend(name)
            fn()  # warm up
            per[name] = best_of(fn, args.repeat)
        rows.append((label, per))

    width = max(len(r[0]) for r in rows)
    header = f"{'case':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(f"dtype={args.dtype} repeat={args.repeat}")
    print(header)
    for label, per in rows:
        line = f"{label:<{width}}  " + "".join(
            f"{per[b] * 1e3:>10.3f}ms" for b in backends)
        if "numpy" in per and "compiled" in per:
            line += f"{per['numpy'] / per['compiled']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
