#!/usr/bin/env python3
# Copyright 2026 The KDFS Authors
# SPDX-License-Identifier: Apache-2.0
"""Build the desk-scale MNIST subset (IDX format) from the `mnist` npm package.

The package ships 10,000 MNIST digits as per-class JSON arrays of 784 floats in
[0, 1]. We take the first 500 samples of each class for training and the next
100 for testing, shuffle each split with a fixed seed, and write big-endian IDX
files that the C++ loader consumes.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100
SIDE = 28


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    if len(sys.argv) != 3:
        sys.exit("usage: make_mnist_subset.py <digits-json-dir> <out-dir>")
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(flat) // (SIDE * SIDE)
        if count < TRAIN_PER_CLASS + TEST_PER_CLASS:
            sys.exit(f"class {digit}: only {count} samples")
        for i in range(TRAIN_PER_CLASS + TEST_PER_CLASS):
            px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = [min(255, max(0, round(v * 255))) for v in px]
            (train if i < TRAIN_PER_CLASS else test).append((img, digit))
    rng = random.Random(20240101)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, split in (("train", train), ("test", test)):
        write_idx_images(out / f"{name}-images-idx3-ubyte", [s[0] for s in split])
        write_idx_labels(out / f"{name}-labels-idx1-ubyte", [s[1] for s in split])
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main()
