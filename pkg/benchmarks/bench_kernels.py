"""Compiled vs pure-Python kernels on ML-toy sized inputs.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints the best wall time per kernel for each backend and the speedup.
"""
import argparse
import time

from babelforge import _pykernels as py
from babelforge.corpus import train_lid
from babelforge.synth import build_benchmark, make_mltoy_config
from babelforge.vocab import _chunks, build_vocab

try:
    from babelforge import _ckernels as cy
except ImportError:
    cy = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def workloads():
    cfg = make_mltoy_config({"k": [("ka", 3000)], "t": [("ta", 3000)]}, lexicon_size=200,
                            eval_size=50, seed=1, mono_docs=200, pivot_mono_docs=200)
    bench = build_benchmark(cfg)
    mono = [bench.mono[l] for l in ("en", "ka", "ta")]
    vocab = build_vocab(mono, 1000, ["en", "ka", "ta"])
    lid = train_lid(mono)
    sents = [s for s, _ in bench.train["ka"].pairs] + [t for _, t in bench.train["ta"].pairs]
    chunks = [c for s in sents for c in _chunks(s)]
    ids, longest = vocab._piece_ids, vocab._max_piece_len
    words = [tuple(c) for c in dict.fromkeys(chunks)]
    freqs = [1 + i % 7 for i in range(len(words))]
    token_lists = [s.split() for s in sents]
    tables, unseen = lid.tables["ka"], lid.unseen["ka"]

    def run(k):
        return {
            "segment": lambda: [k.segment(c, ids, longest, 3) for c in chunks],
            "count_pairs x100": lambda: [k.count_pairs(words, freqs) for _ in range(100)],
            "ngram_counts": lambda: [k.ngram_counts(t, n) for t in token_lists for n in (1, 2, 3, 4)],
            "char_ngram_score": lambda: [k.char_ngram_score(s, tables, unseen) for s in sents],
        }
    return run, len(chunks), len(sents)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    run, n_chunks, n_sents = workloads()
    print(f"{n_chunks} word chunks, {n_sents} sentences, best of {args.repeat}")
    print(f"{'kernel':<18}{'python s':>10}{'cython s':>10}{'speedup':>9}")
    py_jobs = run(py)
    cy_jobs = run(cy) if cy is not None else {}
    for name, job in py_jobs.items():
        tp = best_of(job, args.repeat)
        if name in cy_jobs:
            tc = best_of(cy_jobs[name], args.repeat)
            print(f"{name:<18}{tp:>10.3f}{tc:>10.3f}{tp / tc:>8.1f}x")
        else:
            print(f"{name:<18}{tp:>10.3f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
