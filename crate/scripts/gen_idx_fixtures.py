#!/usr/bin/env python3
"""Writes the small IDX files used by the loader tests.

Run from the repository root; output goes to crates/core/tests/fixtures/idx.
"""
import os
import struct

OUT = os.path.join("crates", "core", "tests", "fixtures", "idx")


def images(count, rows, cols, pixels, magic=0x00000803):
    return struct.pack(">IIII", magic, count, rows, cols) + bytes(pixels)


def labels(values, magic=0x00000801, count=None):
    n = len(values) if count is None else count
    return struct.pack(">II", magic, n) + bytes(values)


FIXTURES = {
    "ok3-images.idx3": images(3, 2, 2, [0, 255, 128, 1, 10, 20, 30, 40, 255, 255, 0, 0]),
    "ok3-labels.idx1": labels([0, 9, 4]),
    "one-images.idx3": images(1, 1, 1, [200]),
    "one-labels.idx1": labels([7]),
    "all-bytes-images.idx3": images(1, 16, 16, range(256)),
    "all-bytes-labels.idx1": labels([5]),
    "classes-images.idx3": images(10, 1, 2, [i * 13 for i in range(20)]),
    "classes-labels.idx1": labels(range(10)),
    "mnist-shape-images.idx3": images(2, 28, 28, [(i * 7) % 256 for i in range(2 * 784)]),
    "mnist-shape-labels.idx1": labels([3, 8]),
    "empty-images.idx3": images(0, 28, 28, []),
    "empty-labels.idx1": labels([]),
    "bad-magic-images.idx3": images(1, 1, 1, [0], magic=0x00000801),
    "bad-magic-labels.idx1": labels([1], magic=0x00000803),
    "truncated-images.idx3": images(3, 2, 2, [1] * 11),
    "truncated-labels.idx1": labels([1, 2], count=3),
    "short-header-images.idx3": struct.pack(">II", 0x00000803, 1),
    "trailing-images.idx3": images(1, 1, 1, [9, 9]),
    "four-labels.idx1": labels([0, 1, 2, 3]),
    "label-range-labels.idx1": labels([0, 10, 1]),
}


def main():
    os.makedirs(OUT, exist_ok=True)
    for name, data in FIXTURES.items():
        with open(os.path.join(OUT, name), "wb") as f:
            f.write(data)
    print(f"wrote {len(FIXTURES)} files to {OUT}")


if __name__ == "__main__":
    main()
