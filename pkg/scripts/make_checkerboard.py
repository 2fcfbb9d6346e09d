#!/usr/bin/env python3
"""Write the reference checkerboard image as a binary PPM."""

import argparse

from hashquant.images import checkerboard, write_ppm


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("path", help="output PPM file")
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--cell", type=int, default=8)
    args = parser.parse_args()
    write_ppm(args.path, checkerboard(args.size, args.cell))
    print(f"wrote {args.size}x{args.size} checkerboard ({args.cell}px cells) to {args.path}")


if __name__ == "__main__":
    main()
