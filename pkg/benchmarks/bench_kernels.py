"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the desk-scale classification run (B=32, N=256, N_l=64, k_l=32).
"""

import argparse
import timeit

import numpy as np

from parot import _fallback

try:
    from parot import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    pts = rng.normal(size=(256, 3))
    refs = pts[:64].copy()
    pool_in = rng.normal(size=(32 * 64, 32, 128)).astype(np.float32)
    vals, arg = _fallback.maxpool(pool_in)
    grad = rng.normal(size=vals.shape).astype(np.float32)
    bn_x = rng.normal(size=(32 * 64 * 32, 128)).astype(np.float32)
    mu, var = _fallback.channel_stats(bn_x)
    inv = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    gamma = np.ones(128, np.float32)
    scale, shift = gamma * inv, (-mu * inv).astype(np.float32)
    bn_out = _fallback.bn_act_forward(bn_x, scale, shift, 0.2, True)
    bn_g = rng.normal(size=bn_x.shape).astype(np.float32)
    src = rng.normal(size=(32 * 64 * 16, 128)).astype(np.float32)
    idx = rng.integers(0, 32 * 64, size=len(src))
    mu32 = mu.astype(np.float32)
    return {
        "fps 256->64": lambda m: m.fps(pts, 64, 0),
        "knn 64x256 k=32": lambda m: m.knn(refs, pts, 32),
        "ball_query 64x256 k=32": lambda m: m.ball_query(refs, pts, 0.3, 32),
        "maxpool (2048,32,128)": lambda m: m.maxpool(pool_in),
        "maxpool_backward": lambda m: m.maxpool_backward(grad, arg, 32),
        "scatter_add_rows": lambda m: m.scatter_add_rows(src, idx, 32 * 64),
        "channel_stats (65536,128)": lambda m: m.channel_stats(bn_x),
        "bn_act_forward": lambda m: m.bn_act_forward(bn_x, scale, shift, 0.2, True),
        "bn_act_backward": lambda m: m.bn_act_backward(bn_g, bn_x, bn_out, mu32, inv, gamma, 0.2, True, True),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>12}{'cython ms':>12}{'speed-up':>10}")
    for name, call in cases(rng).items():
        slow = best_of(lambda: call(_fallback), args.repeat) * 1e3
        fast = best_of(lambda: call(_kernels), args.repeat) * 1e3
        print(f"{name:<28}{slow:>12.3f}{fast:>12.3f}{slow / fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
