#!/usr/bin/env python3
"""Build a 10k-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as per-class JSON arrays with
pixels pre-scaled to [0, 1] (three decimals). This script rescales them to
bytes, splits each class 80/20 in file order into train/test, interleaves the
classes, and writes gzip-compressed IDX files:

    data/mnist-subset/train-images-idx3-ubyte.gz   (8000 x 28 x 28)
    data/mnist-subset/train-labels-idx1-ubyte.gz
    data/mnist-subset/t10k-images-idx3-ubyte.gz    (2000 x 28 x 28)
    data/mnist-subset/t10k-labels-idx1-ubyte.gz

Usage: fetch_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data/mnist-subset]
"""
import argparse
import gzip
import io
import json
import os
import struct
import tarfile
import urllib.request

URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"
SIDE = 28
TRAIN_FRACTION = 0.8


def load_digits(tarball):
    digits = {}
    with tarfile.open(fileobj=io.BytesIO(tarball), mode="r:gz") as tar:
        for d in range(10):
            member = tar.extractfile(f"package/src/digits/{d}.json")
            raw = json.load(member)["data"]
            count = len(raw) // (SIDE * SIDE)
            digits[d] = [
                bytes(
                    min(255, max(0, round(v * 255)))
                    for v in raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
                )
                for k in range(count)
            ]
    return digits


def interleave(per_class):
    out = []
    longest = max(len(v) for v in per_class.values())
    for k in range(longest):
        for d in range(10):
            if k < len(per_class[d]):
                out.append((per_class[d][k], d))
    return out


def write_idx(path_prefix, items):
    images = struct.pack(">IIII", 0x00000803, len(items), SIDE, SIDE)
    images += b"".join(img for img, _ in items)
    labels = struct.pack(">II", 0x00000801, len(items)) + bytes(d for _, d in items)
    # mtime=0 keeps the output byte-reproducible
    for suffix, payload in (("images-idx3-ubyte.gz", images), ("labels-idx1-ubyte.gz", labels)):
        with open(f"{path_prefix}-{suffix}", "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist-subset"))
    args = ap.parse_args()

    if args.tarball:
        with open(args.tarball, "rb") as f:
            blob = f.read()
    else:
        with urllib.request.urlopen(URL, timeout=300) as r:
            blob = r.read()

    digits = load_digits(blob)
    train, test = {}, {}
    for d, imgs in digits.items():
        cut = int(len(imgs) * TRAIN_FRACTION)
        train[d], test[d] = imgs[:cut], imgs[cut:]

    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train"), interleave(train))
    write_idx(os.path.join(args.out, "t10k"), interleave(test))
    for name, part in (("train", train), ("test", test)):
        print(name, sum(len(v) for v in part.values()), {d: len(v) for d, v in part.items()})


if __name__ == "__main__":
    main()
