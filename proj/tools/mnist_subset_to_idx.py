#!/usr/bin/env python3
"""Convert the 10k-digit MNIST sample shipped in the `mnist` npm package to IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_subset_to_idx.py package/src/digits data/mnist

Writes train-images-idx3-ubyte / train-labels-idx1-ubyte (first --train images of a
seeded shuffle) and t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte (next --test).
"""
import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28


def write_idx(prefix: Path, images, labels):
    with open(str(prefix) + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))
    with open(str(prefix) + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=5000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20200101)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        raw = json.loads(Path(args.digits_dir, f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            chunk = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append(([min(255, max(0, round(v * 255))) for v in chunk], digit))

    random.Random(args.seed).shuffle(samples)
    if args.train + args.test > len(samples):
        raise SystemExit(f"only {len(samples)} samples available")
    train = samples[:args.train]
    test = samples[args.train:args.train + args.test]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train", [s[0] for s in train], [s[1] for s in train])
    write_idx(out / "t10k", [s[0] for s in test], [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
