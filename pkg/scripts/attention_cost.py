#!/usr/bin/env python3
"""Token and attention-matrix sizes of the global fusion branch per pyramid level."""

import argparse

from rgbd_uda.core import PYRAMID_STRIDES
from rgbd_uda.fusion import pooled_size


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--size", type=int, nargs=2, default=[512, 512], metavar=("H", "W"))
    p.add_argument("--pools", type=int, nargs=4, default=[4, 2, 1, 1])
    args = p.parse_args()
    h, w = args.size
    print(f"{'stride':>6} {'features':>10} {'pool':>4} {'tokens':>7} {'attention':>12}")
    for s, k in zip(PYRAMID_STRIDES, args.pools):
        fh, fw = -(-h // s), -(-w // s)
        ph, pw = pooled_size((fh, fw), k)
        n = ph * pw
        print(f"{s:>6} {f'{fh}x{fw}':>10} {k:>4} {n:>7} {n * n:>12,}")


if __name__ == "__main__":
    main()
