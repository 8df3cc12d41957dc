"""Timing comparison of the compiled kernels against the numpy fallback.

Run from a checkout where the extension built:

    python3 benchmarks/bench_kernels.py

Prints one row per kernel with mean wall time for each backend and the
speedup.  Uses representative shapes: a few hundred nodes with degree-2
neighborhoods for the graph kernels, and a long multi-window run for the
traffic stepper.
"""

from __future__ import annotations

import time

import numpy as np

from evtraf._kernels import numpy_backend

try:
    from evtraf._kernels import _fast
except ImportError:
    _fast = None


def _graph_case(nodes=400, degree=5, feat=16, seed=0):
    rng = np.random.default_rng(seed)
    src = []
    dst = []
    for d in range(nodes):
        lo = max(0, d - degree)
        hi = min(nodes, d + degree + 1)
        for s in range(lo, hi):
            src.append(s)
            dst.append(d)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    counts = np.bincount(dst, minlength=nodes)
    seg_ptr = np.zeros(nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=seg_ptr[1:])
    logits = rng.standard_normal(src.size)
    grad = rng.standard_normal(src.size)
    feats = rng.standard_normal((nodes, feat))
    gout = rng.standard_normal((nodes, feat))
    return src, seg_ptr, logits, grad, feats, gout


def _traffic_case(nodes=200, seed=1):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(5.0, 60.0, nodes)
    lanes = np.full(nodes, 2.0)
    edge_src = np.arange(nodes - 1, dtype=np.int64)
    edge_dst = np.arange(1, nodes, dtype=np.int64)
    edge_frac = np.ones(nodes - 1)
    inflow = np.zeros(nodes)
    inflow[0] = 1200.0
    cap_factor = np.ones(nodes)
    is_sink = np.zeros(nodes, dtype=np.uint8)
    is_sink[-1] = 1
    return rho, lanes, edge_src, edge_dst, edge_frac, inflow, cap_factor, is_sink


def _time(fn, repeats=30):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    src, seg_ptr, logits, grad, feats, gout = _graph_case()
    weights = numpy_backend.seg_softmax(logits, seg_ptr)
    rho0, lanes, es, ed, frac, inflow, capf, sink = _traffic_case()

    def godunov(backend):
        def run():
            rho = rho0.copy()
            for _ in range(10):
                backend.godunov_window(
                    rho, lanes, es, ed, frac, inflow, capf, sink,
                    20, 0.1, 0.4, 120.0, 18.0, 1800.0, 115.0,
                )
        return run

    cases = [
        ("seg_softmax", lambda b: lambda: b.seg_softmax(logits, seg_ptr)),
        ("seg_softmax_grad", lambda b: lambda: b.seg_softmax_grad(weights, grad, seg_ptr)),
        (
            "gather_weighted_sum",
            lambda b: lambda: b.gather_weighted_sum(weights, feats, src, seg_ptr),
        ),
        (
            "gather_weighted_sum_grad",
            lambda b: lambda: b.gather_weighted_sum_grad(
                weights, feats, src, seg_ptr, gout
            ),
        ),
        ("godunov_window x10", godunov),
    ]
    print(f"{'kernel':28s} {'numpy (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, make in cases:
        t_np = _time(make(numpy_backend)) * 1e6
        if _fast is None:
            print(f"{name:28s} {t_np:12.1f} {'n/a':>12s} {'n/a':>8s}")
            continue
        t_cy = _time(make(_fast)) * 1e6
        print(f"{name:28s} {t_np:12.1f} {t_cy:12.1f} {t_np / t_cy:7.1f}x")
    if _fast is None:
        print("compiled extension not available; showing numpy fallback only")


if __name__ == "__main__":
    main()
