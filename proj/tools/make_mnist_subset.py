#!/usr/bin/env python3
"""Writes a small MNIST subset (digits 0-4, 200 images each) as IDX files.

Source: the 5000-image MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz). Usage:

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl tests/data
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

DIGITS = range(5)
PER_DIGIT = 200


def main():
    wheel, out_dir = sys.argv[1], Path(sys.argv[2])
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    taken = {d: 0 for d in DIGITS}
    images, labels = bytearray(), bytearray()
    for row in rows:
        cells = row.split(",")
        label = int(float(cells[-1]))
        if label not in taken or taken[label] == PER_DIGIT:
            continue
        taken[label] += 1
        images.extend(int(float(c)) for c in cells[:-1])
        labels.append(label)
    n = len(labels)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "mnist04-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
    (out_dir / "mnist04-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} images to {out_dir}")


if __name__ == "__main__":
    main()
