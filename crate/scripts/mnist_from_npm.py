#!/usr/bin/env python3
"""Convert the digit subset shipped in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The package stores 10,000 MNIST digits as JSON arrays of pixel/255 rounded to
three decimals; every value maps back to a unique byte. Samples are shuffled
with a fixed seed and split 9,000 train / 1,000 test.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

ROWS = COLS = 28


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // (ROWS * COLS)):
            chunk = data[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            samples.append((bytes(round(v * 255) for v in chunk), digit))
    random.Random(20200213).shuffle(samples)
    splits = {"train": samples[:9000], "t10k": samples[9000:]}
    for name, items in splits.items():
        images = b"".join(s[0] for s in items)
        labels = bytes(s[1] for s in items)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(items), ROWS, COLS), images)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(items),), labels)
        print(f"{name}: {len(items)} samples")


if __name__ == "__main__":
    main()
