#!/usr/bin/env python3
"""Fetch the full MNIST set (60,000 train / 10,000 test) in IDX format.

The `mnist-data` npm package ships the four original uncompressed IDX files.
This script downloads the package tarball, checks the headers, and writes
gzip-compressed copies:

    data/mnist/train-images-idx3-ubyte.gz
    data/mnist/train-labels-idx1-ubyte.gz
    data/mnist/t10k-images-idx3-ubyte.gz
    data/mnist/t10k-labels-idx1-ubyte.gz

Usage: fetch_mnist.py [--tarball mnist-data-1.2.6.tgz] [--out data/mnist]
"""
import argparse
import gzip
import io
import os
import struct
import tarfile
import urllib.request

URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
FILES = {
    "train-images-idx3-ubyte": (0x00000803, 60000),
    "train-labels-idx1-ubyte": (0x00000801, 60000),
    "t10k-images-idx3-ubyte": (0x00000803, 10000),
    "t10k-labels-idx1-ubyte": (0x00000801, 10000),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    args = ap.parse_args()

    if args.tarball:
        with open(args.tarball, "rb") as f:
            blob = f.read()
    else:
        with urllib.request.urlopen(URL, timeout=300) as r:
            blob = r.read()

    os.makedirs(args.out, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for name, (magic, count) in FILES.items():
            payload = tar.extractfile(f"package/data/{name}").read()
            got_magic, got_count = struct.unpack(">II", payload[:8])
            if (got_magic, got_count) != (magic, count):
                raise SystemExit(f"{name}: header {got_magic:#x}/{got_count}, expected {magic:#x}/{count}")
            # mtime=0 keeps the output byte-reproducible
            with open(os.path.join(args.out, f"{name}.gz"), "wb") as f:
                with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                    gz.write(payload)
            print(name, count)


if __name__ == "__main__":
    main()
