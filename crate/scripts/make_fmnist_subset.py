#!/usr/bin/env python3
"""Build the desk-scale Fashion-MNIST subset used by the acceptance runs.

Reads the per-class JSON dumps shipped in the `fashion-mnist` npm package
(src/clothes/<label>.json, each {"data": [[784 bytes], ...]}) and writes
gzipped IDX files. Train images come from the head of each class list and
test images from the tail, so the two splits never overlap.

    npm pack fashion-mnist@1.1.0 && tar xzf fashion-mnist-1.1.0.tgz
    python3 scripts/make_fmnist_subset.py package/src/clothes data/fmnist-subset
"""
import argparse
import gzip
import json
import pathlib
import struct

import numpy as np


def write_idx(path, array):
    magic = {3: 0x00000803, 1: 0x00000801}[array.ndim]
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("clothes_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    splits = {"train": ([], []), "t10k": ([], [])}
    for label in range(10):
        rows = json.loads((args.clothes_dir / f"{label}.json").read_text())["data"]
        # class 0 carries two empty records
        rows = np.asarray([r for r in rows if len(r) == 784], dtype=np.uint8).reshape(-1, 28, 28)
        for name, chunk in (
            ("train", rows[: args.train_per_class]),
            ("t10k", rows[len(rows) - args.test_per_class :]),
        ):
            splits[name][0].append(chunk)
            splits[name][1].append(np.full(len(chunk), label, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, (images, labels) in splits.items():
        # interleave classes so file order is not sorted by label
        images, labels = np.concatenate(images), np.concatenate(labels)
        order = np.random.default_rng(0).permutation(len(labels))
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", images[order])
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", labels[order])
        print(name, images.shape, np.bincount(labels))


if __name__ == "__main__":
    main()
