#!/usr/bin/env python3
"""Convert the per-digit JSON files shipped in the npm `mnist` package into
IDX files (train-images-idx3-ubyte / train-labels-idx1-ubyte).

usage: mnist_json_to_idx.py <package/src/digits> <out-dir>
"""
import json
import os
import struct
import sys


def main():
    src, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        n = len(flat) // 784
        for i in range(n):
            px = flat[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
            labels.append(digit)
    # interleave digits so prefixes of the file stay class-balanced
    order = sorted(range(len(labels)), key=lambda i: (i * 7919) % len(labels))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "train-images-idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, len(order), 28, 28))
        for i in order:
            fh.write(images[i])
    with open(os.path.join(out, "train-labels-idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", 2049, len(order)))
        fh.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} images to {out}")


if __name__ == "__main__":
    main()
