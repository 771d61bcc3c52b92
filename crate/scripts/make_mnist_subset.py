#!/usr/bin/env python3
"""Build the bundled digits 0-3 MNIST subset as gzipped IDX files.

Source: the `mnist` npm package (src/digits/<d>.json, 28x28 images as
floats in [0,1] rounded to three decimals). Pixels are mapped back to
bytes with round(v * 255). For each digit the last 250 images form the
test split and the rest the train split.

usage: make_mnist_subset.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path

DIGITS = [0, 1, 2, 3]
TEST_PER_CLASS = 250
SIDE = 28


def write_gz(path, payload):
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)


def idx_images(images):
    head = struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE)
    return head + b"".join(bytes(img) for img in images)


def idx_labels(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for d in DIGITS:
        flat = json.loads((src / "src" / "digits" / f"{d}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        imgs = [
            [min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
            for i in range(n)
        ]
        for name, part in (("train", imgs[:-TEST_PER_CLASS]), ("t10k", imgs[-TEST_PER_CLASS:])):
            splits[name][0].extend(part)
            splits[name][1].extend([d] * len(part))
    for name, (imgs, labels) in splits.items():
        write_gz(out / f"{name}-images-idx3-ubyte.gz", idx_images(imgs))
        write_gz(out / f"{name}-labels-idx1-ubyte.gz", idx_labels(labels))
        print(name, len(imgs))


if __name__ == "__main__":
    main()
