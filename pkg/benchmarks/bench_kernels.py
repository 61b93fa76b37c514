"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on encoder-sized inputs, then one forward and backward pass of
the default encoder on a batch of windows, and prints one row per case.
"""
import argparse
import timeit

import numpy as np

from neuroencode import encoder as enc
from neuroencode import gradcore as gc
from neuroencode import kernels


def kernel_cases(rng):
    # shapes of one 64-window batch through the default encoder
    flat = rng.normal(size=64 * 10 * 64)
    g_flat = rng.normal(size=flat.shape)
    rows = rng.normal(size=(640, 32))
    g_rows = rng.normal(size=rows.shape)
    gain, bias = np.ones(32), np.zeros(32)
    _, xhat, rstd = kernels.layer_norm_forward(rows, gain, bias, 1e-5)
    scores = rng.normal(size=(64 * 4 * 10, 10))
    probs = kernels.softmax_forward(scores)
    return {
        "gelu_forward": lambda: kernels.gelu_forward(flat),
        "gelu_backward": lambda: kernels.gelu_backward(flat, g_flat),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(rows, gain, bias, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(g_rows, xhat, rstd, gain),
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(probs, scores),
    }


def encoder_case(rng):
    cfg = enc.EncoderConfig()
    weights = enc.init_encoder(cfg)
    adapters = enc.init_lora(cfg, seed=1)
    windows = rng.normal(0, 0.1, (32, cfg.window_samples))

    def step():
        p = enc.leaves(weights, adapters, train_lora=True)
        hs = enc.run_graph(p, cfg, adapters.scale, windows)
        gc.backward(gc.sum(hs[-1]))

    return step


def best_of(fn, repeat):
    fn()
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    available = ["python"]
    try:
        kernels.use_backend("cython")
        available.insert(0, "cython")
    except ImportError:
        print("compiled extension unavailable; timing the numpy backend only")
    rng = np.random.default_rng(0)
    names = list(kernel_cases(rng)) + ["encoder_fwd_bwd"]
    times = {}
    for backend in available:
        kernels.use_backend(backend)
        cases = {**kernel_cases(np.random.default_rng(0)), "encoder_fwd_bwd": encoder_case(np.random.default_rng(0))}
        times[backend] = {k: best_of(f, args.repeat) for k, f in cases.items()}
    header = f"{'case':<22}" + "".join(f"{b + ' (us)':>16}" for b in available)
    if len(available) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for k in names:
        row = f"{k:<22}" + "".join(f"{times[b][k] * 1e6:>16.1f}" for b in available)
        if len(available) == 2:
            row += f"{times['python'][k] / times['cython'][k]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
