#!/usr/bin/env python3
"""Build a gzipped IDX MNIST subset from the digit JSON files of the `mnist`
npm package (10,000 MNIST digits, ~1,000 per class, pixels stored as k/255
rounded to three decimals).

Usage: make_mnist_subset.py <path/to/package/src/digits> <out_dir>

Writes 8,000 training and 2,000 test samples after a fixed-seed shuffle.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            pixels = bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784])
            samples.append((label, pixels))
    random.Random(20220705).shuffle(samples)
    n_train = 8000
    splits = {"train": samples[:n_train], "t10k": samples[n_train:]}
    for name, rows in splits.items():
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
            for _, px in rows:
                f.write(px)
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(rows)))
            f.write(bytes(label for label, _ in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
