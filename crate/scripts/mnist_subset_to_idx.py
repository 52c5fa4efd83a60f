#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

The package carries 10,000 MNIST digits (grayscale / 255, rounded to three
decimals, so the original bytes are recovered exactly). Each class is split
6:1 in file order into train and test partitions, mirroring the 60k/10k ratio
of the standard distribution.

usage: mnist_subset_to_idx.py <npm-package-dir> <out-dir>
"""
import json
import os
import struct
import sys


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        n = len(flat) // 784
        n_train = (n * 6 + 6) // 7
        for i in range(n):
            px = [int(round(v * 255)) for v in flat[i * 784:(i + 1) * 784]]
            key = "train" if i < n_train else "t10k"
            splits[key][0].append(px)
            splits[key][1].append(digit)
    for key, (imgs, labels) in splits.items():
        # interleave classes deterministically so files are not class-sorted
        order = sorted(range(len(labels)), key=lambda i: ((i * 2654435761) % 2**32, i))
        payload = [p for i in order for p in imgs[i]]
        write_idx(os.path.join(out, f"{key}-images-idx3-ubyte"), 0x803, [len(order), 28, 28], payload)
        write_idx(os.path.join(out, f"{key}-labels-idx1-ubyte"), 0x801, [len(order)], [labels[i] for i in order])
        print(key, len(order))


if __name__ == "__main__":
    main()
