#!/usr/bin/env python3
"""Build MNIST IDX files from the digit dump shipped in the npm `mnist` package.

The package stores 10,000 MNIST digits as JSON arrays of pixel/255 values
(rounded to 3 decimals). Pixels are recovered as bytes with round(v * 255)
and written out as standard big-endian IDX files, split into train/test.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import json
import random
import struct
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        values = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        for i in range(0, len(values), 784):
            img = [int(round(v * 255)) for v in values[i:i + 784]]
            samples.append((img, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out_dir / "train-images-idx3-ubyte", [s[0] for s in train])
    write_idx_labels(args.out_dir / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_idx_images(args.out_dir / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_idx_labels(args.out_dir / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"train={len(train)} test={len(test)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
