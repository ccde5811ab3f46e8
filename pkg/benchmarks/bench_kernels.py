#!/usr/bin/env python3
"""Timing comparison of the compiled kernel core against the NumPy fallback.

Imports both backends directly, bypassing the MODWEAVE_PURE_PY dispatch in
modweave.kernels, runs each hot kernel on identical inputs, and reports
per-call best-of-N wall time, speedup, and the largest output disagreement.
The update kernels mutate their buffers, so every backend gets its own
copies and the parity pass runs on fresh ones.

Usage:
    python benchmarks/bench_kernels.py [--scale N] [--repeats N] [--dtype f32|f64]

Default sizes are a few hundred times one trunk batch, large enough for
stable numbers on a fast machine; --scale inflates them further.

Typical picture: the extension wins big on fps (data-dependent loop) and on
the row-reduction backward passes, roughly ties the elementwise updates,
and loses gelu at float32 where NumPy's vectorized tanh beats a scalar
libm loop. At float64 it wins everything except gelu.
"""

import argparse
import time

import numpy as np

from modweave.kernels import BACKEND, _ref

try:
    from modweave.kernels import _core
except ImportError:
    _core = None


def best_time(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if dt < best:
            best = dt
    return best


def build_cases(rng, dtype, scale):
    """Return (label, input arrays, call) triples.

    call(impl, arrays) runs one kernel invocation and returns the arrays to
    compare across backends: plain outputs, or the mutated buffers for the
    in-place update kernels.
    """
    flat = 262144 * scale
    rows = 2048 * scale
    sm_width = 64
    ln_width = 48
    n_points = 2048 * scale
    n_picks = n_points // 8

    def randn(*shape):
        return rng.standard_normal(shape).astype(dtype)

    x_flat = randn(flat)
    gy_flat = randn(flat)
    x_sm = randn(rows, sm_width)
    y_sm = _ref.softmax_fwd(x_sm)
    gy_sm = randn(rows, sm_width)
    x_ln = randn(rows, ln_width)
    gain = randn(ln_width)
    bias = randn(ln_width)
    _, mean, rstd = _ref.layernorm_fwd(x_ln, gain, bias, 1e-5)
    gy_ln = randn(rows, ln_width)
    p = randn(flat)
    g = randn(flat)
    m = randn(flat)
    v = np.abs(randn(flat))
    buf = randn(flat)
    points = randn(n_points, 3)

    def adam_call(impl, a):
        impl.adam_update(a[0], a[1], a[2], a[3], 7, 1e-3, 0.9, 0.999, 1e-8)
        return a[0], a[2], a[3]

    def sgd_call(impl, a):
        impl.sgd_momentum_update(a[0], a[1], a[2], 1e-3, 0.9)
        return a[0], a[2]

    return [
        (f"gelu_fwd ({flat},)", (x_flat,),
         lambda impl, a: (impl.gelu_fwd(a[0]),)),
        (f"gelu_bwd ({flat},)", (x_flat, gy_flat),
         lambda impl, a: (impl.gelu_bwd(a[0], a[1]),)),
        (f"softmax_fwd ({rows}, {sm_width})", (x_sm,),
         lambda impl, a: (impl.softmax_fwd(a[0]),)),
        (f"softmax_bwd ({rows}, {sm_width})", (y_sm, gy_sm),
         lambda impl, a: (impl.softmax_bwd(a[0], a[1]),)),
        (f"layernorm_fwd ({rows}, {ln_width})", (x_ln, gain, bias),
         lambda impl, a: impl.layernorm_fwd(a[0], a[1], a[2], 1e-5)),
        (f"layernorm_bwd ({rows}, {ln_width})", (x_ln, gain, mean, rstd, gy_ln),
         lambda impl, a: impl.layernorm_bwd(a[0], a[1], a[2], a[3], a[4])),
        (f"adam_update ({flat},)", (p, g, m, v), adam_call),
        (f"sgd_momentum_update ({flat},)", (p, g, buf), sgd_call),
        (f"fps ({n_points} pts, {n_picks} picks)", (points,),
         lambda impl, a: (impl.fps(a[0], n_picks),)),
    ]


def max_abs_diff(outs_a, outs_b):
    worst = 0.0
    for a, b in zip(outs_a, outs_b):
        worst = max(worst, float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                                               - np.asarray(b, dtype=np.float64)))))
    return worst


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=int, default=1, help="size multiplier")
    ap.add_argument("--repeats", type=int, default=50, help="timed calls per kernel")
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    dtype = np.float32 if args.dtype == "f32" else np.float64
    rng = np.random.default_rng(args.seed)
    cases = build_cases(rng, dtype, args.scale)

    print(f"active dispatch: {BACKEND}; extension "
          f"{'importable' if _core is not None else 'NOT importable'}")
    print(f"dtype {np.dtype(dtype).name}, scale {args.scale}, "
          f"best of {args.repeats}\n")

    if _core is None:
        print("compiled core unavailable, timing the NumPy fallback alone\n")
        print(f"{'kernel':<38} {'numpy ms':>10}")
        for label, arrays, call in cases:
            mine = tuple(a.copy() for a in arrays)
            t = best_time(lambda: call(_ref, mine), args.repeats)
            print(f"{label:<38} {t * 1e3:>10.3f}")
        return 0

    print(f"{'kernel':<38} {'numpy ms':>10} {'compiled ms':>12} "
          f"{'speedup':>8} {'max|diff|':>10}")
    for label, arrays, call in cases:
        diff = max_abs_diff(call(_ref, tuple(a.copy() for a in arrays)),
                            call(_core, tuple(a.copy() for a in arrays)))
        ref_arrays = tuple(a.copy() for a in arrays)
        core_arrays = tuple(a.copy() for a in arrays)
        t_ref = best_time(lambda: call(_ref, ref_arrays), args.repeats)
        t_core = best_time(lambda: call(_core, core_arrays), args.repeats)
        print(f"{label:<38} {t_ref * 1e3:>10.3f} {t_core * 1e3:>12.3f} "
              f"{t_ref / t_core:>7.1f}x {diff:>10.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
