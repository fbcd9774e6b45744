#!/usr/bin/env python3
"""Print shape-aware tuning parameters and autotune grids for a sweep of
problem shapes, per GPU family. Handy when eyeballing the parameter
derivation rules.

    python scripts/print_tuning_table.py [--bytes-per-element 2]
"""

import argparse

from kernelsmith.hardware import (
    GpuProfile,
    GrfMode,
    generate_autotune_grid,
    get_optimal_params,
)

SHAPES = [
    (64, 64, 64),
    (512, 512, 512),
    (4096, 4096, 4096),
    (100, 4096, 512),     # short-wide, non-power-of-two M
    (8192, 512, 512),     # tall-skinny
    (2048, 2048, 16384),  # deep K
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bytes-per-element", type=int, default=2)
    args = parser.parse_args()

    header = f"{'family':<11} {'m':>6} {'n':>6} {'k':>6} | {'bm':>4} {'bn':>4} {'bk':>4} {'grp':>4} {'warps':>5} {'stages':>6} {'grid':>4}"
    print(header)
    print("-" * len(header))
    for family, cu in (("arc_pro", 32), ("arc", 32), ("integrated", 8)):
        profile = GpuProfile(family=family, max_compute_units=cu)
        for m, n, k in SHAPES:
            p = get_optimal_params(profile, GrfMode.large(), m, n, k, args.bytes_per_element)
            grid = generate_autotune_grid(profile, m, n, k, args.bytes_per_element)
            print(
                f"{family:<11} {m:>6} {n:>6} {k:>6} | {p.block_m:>4} {p.block_n:>4} "
                f"{p.block_k:>4} {p.group_size_m:>4} {p.num_warps:>5} {p.num_stages:>6} "
                f"{len(grid.configs):>4}"
            )
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
