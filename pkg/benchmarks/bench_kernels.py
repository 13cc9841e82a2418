"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both paths are imported explicitly, so the SOCLM_PURE_NUMPY flag does not
matter here. The first numba call is a warm-up and is not timed.
"""
import argparse
import time

import numpy as np

from soclm import kernels
from soclm.graph import WorldConfig, generate_synthetic_world
from soclm.twhin import EmbeddingTable, NegSampleConfig, draw_negatives, entity_frequencies


def sgd_case(scale):
    w = generate_synthetic_world(WorldConfig(n_users=int(600 * scale), n_tweets=int(2000 * scale),
                                             n_topics=4), seed=0)
    g = w.graph
    rng = np.random.default_rng(0)
    table = EmbeddingTable.init(g, 32, rng)
    order = rng.permutation(g.n_edges)
    uf, tf = entity_frequencies(g)
    ents, sides = draw_negatives(g.edges[order], g.n_users, g.n_tweets, uf, tf,
                                 NegSampleConfig(n_negatives=3), rng)
    edges = np.ascontiguousarray(g.edges)

    def call(impl):
        U, T, R = table.user_vecs.copy(), table.tweet_vecs.copy(), table.rel_vecs.copy()
        acc = [np.zeros_like(U), np.zeros_like(T), np.zeros_like(R)]
        impl(U, T, R, *acc, edges, order, ents, sides, 0.05, 1e-10)

    return f"sgd_epoch ({g.n_edges} edges, d=32)", call


def nearest_case(scale):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(int(20000 * scale), 32))
    C = rng.normal(size=(256, 32))
    return f"nearest_centroids ({len(X)}x256, d=32)", lambda impl: impl(X, C)


def adc_case(scale):
    rng = np.random.default_rng(2)
    lut = rng.random((8, 256))
    codes = rng.integers(0, 256, (int(200000 * scale), 8)).astype(np.uint8)
    return f"adc_scan ({len(codes)} codes, m=8)", lambda impl: impl(lut, codes)


CASES = {"sgd_epoch": sgd_case, "nearest_centroids": nearest_case, "adc_scan": adc_case}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies problem sizes")
    args = ap.parse_args()

    print(f"{'kernel':<44}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for key, make in CASES.items():
        label, call = make(args.scale)
        nb_impl, np_impl = kernels.NUMBA_IMPLS[key], kernels.NUMPY_IMPLS[key]
        call(nb_impl)  # compile
        t_nb = best_of(lambda: call(nb_impl), args.repeat)
        t_np = best_of(lambda: call(np_impl), args.repeat)
        print(f"{label:<44}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
