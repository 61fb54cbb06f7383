"""Compare plain iteration with Anderson acceleration on symmetric affine contractions.

Prints one row per dimension: iterations to reach the tolerance for plain
iteration and for Anderson with depths 1, 3 and 5.
"""
import argparse

import numpy as np

from scideq.fixedpoint import AndersonConfig, affine_contraction, iterate_plain, solve_anderson


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dims", type=int, nargs="+", default=[2, 3, 4, 8, 16, 32, 64])
    parser.add_argument("--radius", type=float, default=0.9)
    parser.add_argument("--tol", type=float, default=1e-8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-iters", type=int, default=5000)
    args = parser.parse_args()

    depths = (1, 3, 5)
    print("dim  plain  " + "  ".join(f"s={s}" for s in depths) + "  err(s=3)")
    for dim in args.dims:
        f, x_star = affine_contraction(dim, args.radius, args.seed)
        x0 = np.zeros(dim)
        _, plain = iterate_plain(f, x0, args.max_iters, args.tol)
        row = [f"{dim:3d}", f"{plain.iterations:5d}"]
        for s in depths:
            x, trace = solve_anderson(f, x0, AndersonConfig(s, 1.0, args.max_iters, args.tol))
            row.append(f"{trace.iterations:4d}")
            if s == 3:
                err = np.max(np.abs(x - x_star))
        row.append(f"{err:.1e}")
        print("  ".join(row))


if __name__ == "__main__":
    main()
