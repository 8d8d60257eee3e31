#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package (v1.1.0)
into gzipped IDX files readable by `hashlab`.

The package stores 10,000 MNIST training digits as pixel/255 rounded to
three decimals, so round(v * 255) recovers the original bytes exactly.

usage: mnist_json_to_idx.py <package/src/digits> <out dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    images, labels = bytearray(), bytearray()
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        images += bytes(round(v * 255) for v in flat)
        labels += bytes([digit]) * (len(flat) // 784)
    n = len(labels)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28) + images)
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n) + labels)
    print(f"wrote {n} items to {out}")


if __name__ == "__main__":
    main()
