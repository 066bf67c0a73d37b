"""Times the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from aoimec import _kernels as K
from aoimec.pds_tabular import _cdf, two_state_queue_mdp


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    n_seg, per = 2000, 6
    offsets = np.arange(0, n_seg * per + 1, per, dtype=np.int64)
    rem = rng.uniform(2e4, 5e4, n_seg * per)
    processed = rng.uniform(0, 2e5, n_seg)
    yield ("drain 2000x6", lambda f: f(offsets, rem, processed, 1e-6, False), K.drain_numba, K.drain_numpy)

    n, a = 200, 4
    P = rng.random((n, a, n))
    P /= P.sum(2, keepdims=True)
    C = rng.random((n, a))
    yield ("rvi 200x4", lambda f: f(P, C, 0, 1e-10, 100000), K.rvi_numba, K.rvi_numpy)

    mdp = two_state_queue_mdp()
    u = rng.random(100_000)
    args = (np.ascontiguousarray(mdp.cost), np.ascontiguousarray(mdp.post), _cdf(mdp.pu))
    yield ("pds 1e5 steps", lambda f: f(*args, u, 0, np.zeros(mdp.n_pds), 0.0, 1, 0.5), K.pds_numba, K.pds_numpy)

    u3 = rng.random((100_000, 3))
    pc = _cdf(mdp.transition())
    yield ("q 1e5 steps",
           lambda f: f(np.ascontiguousarray(mdp.cost), pc, u3, True, 0, np.zeros((mdp.n_states, mdp.n_actions)),
                       0.0, 1, 0.5, 0.01),
           K.q_numba, K.q_numpy)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, call, fa, fb in cases():
        ta = best_of(lambda: call(fa), args.repeat)
        tb = best_of(lambda: call(fb), args.repeat)
        print(f"{name:<16}{ta * 1e3:>12.3f}{tb * 1e3:>12.3f}{tb / ta:>10.1f}x")


if __name__ == "__main__":
    main()
