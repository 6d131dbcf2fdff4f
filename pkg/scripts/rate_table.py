#!/usr/bin/env python3
"""Print the index-only rate table for a codebook-size sweep.

For each K, one row: bits per pixel (n_q·log2 K), payload bytes for one
H×W map, and the compression ratio against raw 32-bit features
(32·C / bpp). Defaults reproduce the 256-channel, 3-stage operating
points: bpp {6, 12, 18, 24, 30}, ratios {1365, 683, 455, 341, 273}.
"""

import argparse

from rvqcodec.codec import CodecConfig, bits_per_pixel, compression_ratio
from rvqcodec.wire import payload_size_bits


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=256)
    ap.add_argument("--stages", type=int, default=3)
    ap.add_argument("--K", type=str, default="4,16,64,256,1024",
                    help="comma-separated codebook sizes")
    ap.add_argument("--height", type=int, default=128)
    ap.add_argument("--width", type=int, default=128)
    args = ap.parse_args()

    ks = [int(v) for v in args.K.split(",")]
    raw_bits = 32 * args.channels
    print(f"# C={args.channels} n_q={args.stages} "
          f"map={args.height}x{args.width} raw={raw_bits} bits/px")
    print(f"{'K':>6} {'bpp':>5} {'payload_B':>10} {'compression':>12}")
    for k in ks:
        cfg = CodecConfig(channels=args.channels, stages=args.stages,
                          codebook_size=k)
        bpp = bits_per_pixel(cfg)
        nbytes = (payload_size_bits(args.height, args.width,
                                    args.stages, k) + 7) // 8
        print(f"{k:>6} {bpp:>5} {nbytes:>10} {round(compression_ratio(cfg)):>11}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
