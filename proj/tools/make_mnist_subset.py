#!/usr/bin/env python3
"""Convert the 5000-image MNIST sample shipped inside the mlxtend wheel into
standard gzipped IDX files (4000 train / 1000 test, 400/100 per class).

Usage: make_mnist_subset.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def load_rows(path):
    if path.endswith(".whl"):
        with zipfile.ZipFile(path) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        with open(path, "rb") as f:
            raw = f.read()
    text = gzip.decompress(raw).decode()
    return np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)


def write_idx(path, magic, array):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    src, out = sys.argv[1], sys.argv[2]
    rows = load_rows(src)
    pixels, labels = rows[:, :-1], rows[:, -1]
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:500])
    rng = np.random.default_rng(20200101)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", 0x00000803,
                  pixels[idx].reshape(-1, 28, 28))
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", 0x00000801, labels[idx])


if __name__ == "__main__":
    main()
