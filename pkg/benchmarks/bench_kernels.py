"""Compare the compiled and numpy convolution kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Times im2col, col2im and a full training step of the desk-scale model
for both backends on the shapes the model actually sees, then prints
the speedup. Outputs are also checked for agreement.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from spkfilm.model import DESK_WIDTHS, ConditioningConfig, ModelConfig, build_model
from spkfilm.nn import kernels, softmax_cross_entropy
from spkfilm.nn.layers import Conv2d

# (channels, height, width, kernel, stride) seen inside the desk model
SHAPES = [(1, 21, 13, 3, 1), (8, 21, 13, 3, 1), (8, 21, 13, 3, 2), (16, 11, 7, 3, 1), (32, 6, 4, 3, 1), (64, 3, 2, 3, 1)]


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_lowering(batch, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for c, h, w, k, s in SHAPES:
        x = rng.standard_normal((batch, c, h, w)).astype(np.float32)
        col = kernels.im2col(x, k, s, 1, backend="python")
        assert np.array_equal(col, kernels.im2col(x, k, s, 1, backend="cython"))
        back_py = kernels.col2im(col, x.shape, k, s, 1, backend="python")
        np.testing.assert_allclose(back_py, kernels.col2im(col, x.shape, k, s, 1, backend="cython"), rtol=1e-5, atol=1e-5)
        for op, args in (("im2col", (x, k, s, 1)), ("col2im", (col, x.shape, k, s, 1))):
            fn = getattr(kernels, op)
            t_py = _time(lambda: fn(*args, backend="python"), repeat)
            t_cy = _time(lambda: fn(*args, backend="cython"), repeat)
            rows.append((f"{op} C={c} {h}x{w} s{s}", t_py, t_cy))
    return rows


def bench_training_step(batch, repeat):
    rng = np.random.default_rng(0)
    mc = ModelConfig(stage_channels=DESK_WIDTHS, num_classes=10, input_shape=(1, 21, 13), embedding_dim=64)
    x = rng.standard_normal((batch, 21, 13)).astype(np.float32)
    z = rng.standard_normal((batch, 64)).astype(np.float32)
    y = rng.integers(0, 10, batch)
    rows = []
    timings = {}
    for backend in ("python", "cython"):
        model = build_model(mc, ConditioningConfig(generator_hidden=64), seed=0)
        for _, m in model.named_modules():
            if isinstance(m, Conv2d):
                m.backend = backend

        def step():
            _, g = softmax_cross_entropy(model.forward(x, z), y)
            model.backward(g)

        timings[backend] = _time(step, repeat)
    rows.append((f"train step batch={batch}", timings["python"], timings["cython"]))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--batch", type=int, default=256)
    args = p.parse_args(argv)
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels not built; run 'pip install -e . --no-build-isolation' first")
    rows = bench_lowering(args.batch, args.repeat) + bench_training_step(args.batch, args.repeat)
    print(f"{'case':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, t_py, t_cy in rows:
        print(f"{name:<28}{1e3 * t_py:12.3f}{1e3 * t_cy:12.3f}{t_py / t_cy:10.2f}")


if __name__ == "__main__":
    main()
