#!/usr/bin/env python3
"""Build the mnist-mini IDX pair (digits 0, 1, 2; 3000 images; 28x28) from the
digit JSON files shipped in the MIT-licensed `mnist` npm package
(https://github.com/cazala/mnist). Usage:

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 tools/make_mnist_mini.py package/src/digits data/mnist-mini
"""
import json
import random
import struct
import sys
from pathlib import Path

# The package holds only 991 twos, so the ones make up the difference.
QUOTA = {0: 1001, 1: 1008, 2: 991}


def main(src: Path, dst: Path) -> None:
    samples = []
    for d, quota in QUOTA.items():
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        n = len(flat) // 784
        for i in range(min(n, quota)):
            px = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
            samples.append((px, d))
    random.Random(20201).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    with open(dst / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with open(dst / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(lbl for _, lbl in samples))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
