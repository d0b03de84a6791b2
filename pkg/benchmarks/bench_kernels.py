"""Compiled vs pure-Python retrieval kernels on the same base and queries.

    python3 benchmarks/bench_kernels.py [--entries N] [--batch B] [--batches K]
"""
import argparse
import time

from ternkb import kernels
from ternkb.bench import bench_retrieval, random_dataset, random_kb
from ternkb.data import FeatureSchema
from ternkb.utilize import retrieve


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entries", type=int, default=1_000_000)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--batches", type=int, default=20)
    ap.add_argument("--cardinality", type=int, default=5000)
    a = ap.parse_args()

    schema = FeatureSchema.build(["u0", "u1", ("u2", "multi")], ["v0", "v1", "v2"], ["c0", "c1", "c2", "c3"])
    sizes = {f.name: a.cardinality for f in schema.fields}
    data = random_dataset(schema, sizes, (a.batches + 1) * a.batch, seed=0)
    t0 = time.perf_counter()
    kb = random_kb(schema, sizes, a.entries, cover=data.take(range(0, len(data), 2)))
    print(f"base: {len(kb)} entries, {kb.nbytes / 2**20:.1f} MiB, N_q={schema.n_queries}, "
          f"built in {time.perf_counter() - t0:.1f}s")

    backends = ["python"] + (["compiled"] if kernels.compiled_backend is not None else [])
    results = {}
    for name in backends:
        t0 = time.perf_counter()
        kb.index(name)
        build = time.perf_counter() - t0
        res = bench_retrieval(kb, data, a.batch, a.batches, backend=name)
        results[name] = res
        print(f"{name:>9}: index {build * 1000:8.1f} ms   retrieve median {res.median_ms:8.2f} ms/batch "
              f"({res.per_sample_us:6.2f} us/sample)")
    if len(results) == 2:
        head = data.take(range(a.batch))
        same = retrieve(head, kb, backend="python").vectors.tobytes() == \
            retrieve(head, kb, backend="compiled").vectors.tobytes()
        print(f"speed-up {results['python'].median_ms / results['compiled'].median_ms:.1f}x, "
              f"outputs identical: {same}")
    else:
        print("compiled kernels not built; only the pure-Python backend was timed")


if __name__ == "__main__":
    main()
