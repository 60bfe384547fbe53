"""Benchmark the hot kernels under both backends, plus end-to-end training.

Each kernel is timed at the shapes a typical training step produces
(batch 64, window 3x3, 64 hidden features, 162 bands, 4 endmembers).
Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 200] [--skip-train]
"""

import argparse
import time

import numpy as np

from dsanet import hsidata, kernels, specview
from dsanet import model as net
from dsanet.kernels import numba_impl, numpy_impl

B, K, D, L, P = 64, 9, 64, 162, 4
ROWS = B * K


def kernel_cases(rng):
    x_rows = rng.uniform(-2.0, 2.0, ROWS * D)
    g_rows = rng.uniform(-1.0, 1.0, ROWS * D)
    bn_x = rng.uniform(-2.0, 2.0, (ROWS, D))
    bn_g = rng.uniform(-1.0, 1.0, (ROWS, D))
    gamma = rng.uniform(0.5, 1.5, D)
    beta = rng.uniform(-0.5, 0.5, D)
    rmean = rng.uniform(-0.5, 0.5, D)
    rvar = rng.uniform(0.5, 2.0, D)
    _, xhat, inv_std, _, _ = numpy_impl.bn_train_fwd(bn_x, gamma, beta, 1e-5)
    conv_x = rng.uniform(-2.0, 2.0, (B, D, K))
    conv_k = rng.uniform(-1.0, 1.0, (P, D, K))
    conv_b = rng.uniform(-0.5, 0.5, P)
    conv_g = rng.uniform(-1.0, 1.0, (B, P))
    sm_x = rng.uniform(-4.0, 4.0, (B, P))
    sm_y = numpy_impl.softmax_fwd(sm_x)
    sad_x = rng.uniform(0.05, 1.0, (B, L))
    sad_y = rng.uniform(0.05, 1.0, (B, L))
    sad_g = rng.uniform(-1.0, 1.0, B)
    lh_s = rng.dirichlet(np.ones(P), size=B)
    lh_g = rng.uniform(-1.0, 1.0, B)
    n_par = L * D
    adam = [
        rng.uniform(-1.0, 1.0, n_par),   # parameters
        rng.uniform(-1.0, 1.0, n_par),   # gradients (copied per call)
        np.zeros(n_par),                 # first moment
        np.zeros(n_par),                 # second moment
    ]

    return [
        ("relu_fwd", lambda m: m.relu_fwd(x_rows)),
        ("relu_bwd", lambda m: m.relu_bwd(x_rows, g_rows)),
        ("sigmoid_fwd", lambda m: m.sigmoid_fwd(x_rows)),
        ("softmax_fwd", lambda m: m.softmax_fwd(sm_x)),
        ("softmax_bwd", lambda m: m.softmax_bwd(sm_y, conv_g)),
        ("bn_train_fwd", lambda m: m.bn_train_fwd(bn_x, gamma, beta, 1e-5)),
        ("bn_train_bwd", lambda m: m.bn_train_bwd(bn_g, xhat, inv_std, gamma)),
        ("bn_infer_fwd", lambda m: m.bn_infer_fwd(bn_x, gamma, beta, rmean, rvar, 1e-5)),
        ("conv_collapse_fwd", lambda m: m.conv_collapse_fwd(conv_x, conv_k, conv_b)),
        ("conv_collapse_bwd", lambda m: m.conv_collapse_bwd(conv_x, conv_k, conv_g)),
        ("sad_rows_fwd", lambda m: m.sad_rows_fwd(sad_x, sad_y, 1e-7)),
        ("sad_rows_bwd", lambda m: m.sad_rows_bwd(sad_x, sad_y, sad_g, 1e-7)),
        ("lhalf_rows_fwd", lambda m: m.lhalf_rows_fwd(lh_s, 1e-12)),
        ("lhalf_rows_bwd", lambda m: m.lhalf_rows_bwd(lh_s, lh_g, 1e-12)),
        (
            "adam_update",
            lambda m: m.adam_update(
                adam[0], adam[1].copy(), adam[2], adam[3], 5, 1e-3, 0.9, 0.999,
                1e-8, True,
            ),
        ),
    ]


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call in cases:
        call(numba_impl)   # trigger JIT before timing
        t_np = median_time(lambda: call(numpy_impl), repeats)
        t_nb = median_time(lambda: call(numba_impl), repeats)
        print(f"{name:22s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.2f}x")


def bench_training():
    cube, _ = hsidata.generate_synthetic(20, 20, 40, 3, 30.0, 0.5, seed=0)
    cube = hsidata.normalize_cube(cube)
    corr = specview.band_correlation(cube, sample_size=400, seed=0)
    partition = specview.partition_views(specview.cluster_bands(corr, 4), 4)
    print(f"\n{'training (10 epochs, 20x20, L=40)':38s} {'seconds':>8s} {'s/epoch':>8s}")
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        cfg = net.ModelConfig(
            n_end=3, partition=partition, window=3, hidden=64, dropout=0.1,
            lambda_sad=1.0, lambda_sparse=1e-3, learning_rate=1e-3,
            batch_size=64, epochs=10, seed=0,
        )
        net.train(cube, cfg)   # warm caches and JIT
        t0 = time.perf_counter()
        net.train(cube, cfg)
        dt = time.perf_counter() - t0
        print(f"{backend:38s} {dt:8.2f} {dt / 10:8.3f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args()
    prev = kernels.get_backend()
    try:
        bench_kernels(args.repeats)
        if not args.skip_train:
            bench_training()
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
