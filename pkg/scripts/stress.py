#!/usr/bin/env python3
import sys
import time

from unisplat.checks import compare_with_reference
from unisplat.rasterizer import RasterOptions


def main() -> None:
    argv = sys.argv[1:]
    max_iterations = 100
    max_gaussians = 50
    tolerance = 1e-6
    seed = 0

    i = 0
    while i < len(argv):
        if argv[i] == "--max-iterations" and i + 1 < len(argv):
            max_iterations = int(argv[i + 1])
            i += 2
        elif argv[i] == "--max-gaussians" and i + 1 < len(argv):
            max_gaussians = int(argv[i + 1])
            i += 2
        elif argv[i] == "--tolerance" and i + 1 < len(argv):
            tolerance = float(argv[i + 1])
            i += 2
        elif argv[i] == "--seed" and i + 1 < len(argv):
            seed = int(argv[i + 1])
            i += 2
        else:
            print(
                "Usage: stress.py [--max-iterations N] [--max-gaussians N] "
                "[--tolerance T] [--seed S]",
                file=sys.stderr,
            )
            sys.exit(1)

    start = time.perf_counter()
    for iteration in range(1, max_iterations + 1):
        case_seed = seed + iteration
        n = 1 + case_seed % max_gaussians
        for options in (RasterOptions(early_exit=False), RasterOptions()):
            diff, max_alpha = compare_with_reference(case_seed, n=n, options=options)
            if diff > tolerance:
                print(
                    f"[stress] mismatch on iteration {iteration} (seed {case_seed}, "
                    f"{n} gaussians, early_exit={options.early_exit}): {diff:.3e}",
                    file=sys.stderr,
                )
                sys.exit(1)
            if max_alpha > 1.0 + 1e-12:
                print(
                    f"[stress] blend weights sum to {max_alpha} on seed {case_seed}",
                    file=sys.stderr,
                )
                sys.exit(1)

    elapsed = time.perf_counter() - start
    print(f"[stress] all {max_iterations} scenes match ({elapsed:.1f}s)")


if __name__ == "__main__":
    main()
