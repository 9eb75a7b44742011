"""Compare the compiled kernels with their pure-Python fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--articles N]

Reports best-of-N wall time for tokenizing a large article, header-only
scanning of a small and a very large article, evaluating a long postfix
program, and verifying a generated library end to end under each backend.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
from array import array

from fwiki import _purepy

try:
    from fwiki import _speedups
except ImportError:
    _speedups = None


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def article_text(body_bytes: int) -> str:
    header = "article big\nenviron imports a, b, c;\nbegin\n"
    item = "def d{i} : c{i} := (1 + 2) * 3 - 4;\n"
    parts, size, i = [header], len(header), 0
    while size < body_bytes:
        line = item.format(i=i)
        parts.append(line)
        size += len(line)
        i += 1
    return "".join(parts)


def postfix_chain(n: int) -> tuple[array, array]:
    code = [_purepy.OP_VAR, 0]
    for i in range(n):
        code += [_purepy.OP_CONST, i % 7, _purepy.OP_ADD if i % 2 else _purepy.OP_SUB, 0]
    return array("q", code), array("q", [1])


_E2E = """
import sys, time
from fwiki import kernels, synth
from fwiki.verifier import verify_library
lib = synth.layered({n}, 10, seed=1, theorems=4)
sources = {{k[:-4]: v for k, v in lib.texts().items()}}
t0 = time.perf_counter()
verify_library(sources)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def end_to_end(n: int, pure: bool) -> tuple[str, float]:
    env = dict(os.environ)
    if pure:
        env["FWIKI_PURE_PYTHON"] = "1"
    else:
        env.pop("FWIKI_PURE_PYTHON", None)
    out = subprocess.run(
        [sys.executable, "-c", _E2E.format(n=n)], env=env, capture_output=True, text=True, check=True
    ).stdout.split()
    return out[0], float(out[1])


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--articles", type=int, default=300)
    args = parser.parse_args(argv)

    small = article_text(1_000)
    medium = article_text(1_000_000)
    large = article_text(10_000_000)
    program = postfix_chain(50_000)

    impls = [("python", _purepy)] + ([("cython", _speedups)] if _speedups is not None else [])
    rows = []
    for label, fn in (
        ("tokenize 1 MB", lambda m: m.tokenize(medium)),
        ("header scan 1 KB", lambda m: m.tokenize(small, True)),
        ("header scan 10 MB", lambda m: m.tokenize(large, True)),
        ("eval_postfix 50k ops", lambda m: m.eval_postfix(*program)),
    ):
        times = {name: best_of(lambda mod=mod: fn(mod), args.repeat) for name, mod in impls}
        rows.append((label, times))

    print(f"{'kernel':24} {'python':>12} {'cython':>12} {'speedup':>9}")
    for label, times in rows:
        py = times["python"]
        cy = times.get("cython")
        cy_s = f"{cy * 1e3:10.3f}ms" if cy is not None else f"{'n/a':>12}"
        ratio = f"{py / cy:8.1f}x" if cy else f"{'-':>9}"
        print(f"{label:24} {py * 1e3:10.3f}ms {cy_s} {ratio}")

    print()
    print(f"end-to-end verification of {args.articles} generated articles:")
    for pure in (True, False):
        backend, seconds = end_to_end(args.articles, pure)
        print(f"  {backend:8} {seconds:8.3f}s")
    if _speedups is None:
        print("compiled extension not built; only the fallback was measured", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
