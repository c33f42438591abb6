"""Time the compiled and numpy LSTM kernels on a training-sized batch.

    python3 benchmarks/bench_lstm.py [--batch 32] [--steps 60] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from attnp._kernels import backends


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--steps", type=int, default=60)
    parser.add_argument("--input", type=int, default=50)
    parser.add_argument("--hidden", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    B, T, D, H = args.batch, args.steps, args.input, args.hidden
    x = rng.normal(size=(B, T, D))
    lengths = rng.integers(T // 2, T + 1, size=B)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    w_x = rng.uniform(-0.2, 0.2, (D, 4 * H))
    w_h = rng.uniform(-0.2, 0.2, (H, 4 * H))
    bias = rng.uniform(-0.2, 0.2, 4 * H)
    dhs = rng.normal(size=(B, T, H))

    impls = backends()
    results = {}
    print(f"B={B} T={T} D={D} H={H}, best of {args.repeat}")
    for name, (fwd, bwd) in impls.items():
        hs, cache = fwd(x, mask, w_x, w_h, bias, False)
        t_f = min(timeit.repeat(lambda: fwd(x, mask, w_x, w_h, bias, False),
                                number=1, repeat=args.repeat))
        t_b = min(timeit.repeat(lambda: bwd(dhs, x, mask, w_x, w_h, cache, False),
                                number=1, repeat=args.repeat))
        results[name] = (hs, bwd(dhs, x, mask, w_x, w_h, cache, False))
        print(f"{name:>7}: forward {t_f * 1e3:7.2f} ms   backward {t_b * 1e3:7.2f} ms")
    if len(results) == 2:
        (h1, g1), (h2, g2) = results["python"], results["cython"]
        diff = max(np.abs(h1 - h2).max(), *(np.abs(a - b).max() for a, b in zip(g1, g2)))
        print(f"max abs difference between backends: {diff:.2e}")


if __name__ == "__main__":
    main()
