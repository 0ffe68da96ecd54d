"""Compiled vs pure-Python kernel benchmark.

Generates a synthetic corpus, then times the three hot kernels over all
of its note text with both implementations:

    python benchmarks/bench_kernels.py [--encounters 20] [--repeats 3]

The compiled extension is built with `python setup.py build_ext --inplace`;
without it this script still runs but reports the fallback twice.
"""

from __future__ import annotations

import argparse
import statistics
import tempfile
import time
from pathlib import Path


def load_notes(n_encounters: int) -> list[str]:
    from ehrrag.corpus import load_corpus
    from ehrrag.synth import SynthConfig, generate_corpus

    tmp = Path(tempfile.mkdtemp(prefix="ehrrag-bench-"))
    generate_corpus(SynthConfig(seed=42, n_encounters=n_encounters), tmp)
    corpus, _ = load_corpus(tmp / "corpus.jsonl")
    return [note.text for h in corpus for note in h.notes]


def bench(fn, texts: list[str], repeats: int) -> float:
    timings = []
    for _ in range(repeats):
        started = time.perf_counter()
        for text in texts:
            fn(text)
        timings.append(time.perf_counter() - started)
    return min(timings)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--encounters", type=int, default=20)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    from ehrrag._kernels import fallback

    try:
        from ehrrag._kernels import _speedups as compiled
    except ImportError:
        compiled = None
        print("compiled extension not built; benchmarking the fallback only\n")

    texts = load_notes(args.encounters)
    n_tokens = sum(fallback.count_tokens(t) for t in texts)
    print(f"workload: {len(texts)} notes, {n_tokens} tokens "
          f"({args.encounters} encounters)\n")

    kernels = [
        ("count_tokens", lambda impl: impl.count_tokens),
        ("tokenize_spans", lambda impl: impl.tokenize_spans),
        ("hashed_bow (1024)", lambda impl: (lambda t: impl.hashed_bow_accumulate(t, 1024))),
    ]
    print(f"{'kernel':20s} {'python':>12s} {'cython':>12s} {'speedup':>9s}")
    for name, get in kernels:
        python_s = bench(get(fallback), texts, args.repeats)
        row = f"{name:20s} {python_s * 1e3:10.1f}ms"
        if compiled is not None:
            cython_s = bench(get(compiled), texts, args.repeats)
            row += f" {cython_s * 1e3:10.1f}ms {python_s / cython_s:8.1f}x"
        print(row)

    if compiled is not None:
        sample = texts[: len(texts) // 10 or 1]
        mismatches = sum(
            1 for t in sample
            if compiled.tokenize_spans(t) != fallback.tokenize_spans(t))
        print(f"\nparity check on {len(sample)} notes: "
              f"{'ok' if mismatches == 0 else f'{mismatches} MISMATCHES'}")


if __name__ == "__main__":
    main()
