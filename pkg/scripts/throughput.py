#!/usr/bin/env python3
"""Wall time of one full re-ranking pass for several worker counts."""

import argparse
import json
import os
import time

import numpy as np

from protoconf import CandidatePool, Modality, PrototypeSet, WeightVector, rerank


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--candidates", type=int, default=10_000)
    ap.add_argument("--k", type=int, default=26)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    w = WeightVector.uniform(args.k)
    pool = CandidatePool.from_array([f"c{j}" for j in range(args.candidates)],
                                    rng.standard_normal((args.candidates, args.k, args.dim)), w)
    query = PrototypeSet("q", Modality.IMAGE, rng.standard_normal((args.k, args.dim)))
    rerank(query, pool, w)  # warm-up
    base = None
    for n in (int(x) for x in args.workers.split(",")):
        best = min(_timed(lambda: rerank(query, pool, w, workers=n)) for _ in range(args.repeats))
        base = base or best
        print(json.dumps({"workers": n, "seconds": round(best, 3), "speedup": round(base / best, 2),
                          "cpus": os.cpu_count()}))


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


if __name__ == "__main__":
    main()
