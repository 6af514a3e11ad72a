#!/usr/bin/env python3
"""Write the 5000-sample MNIST subset shipped with mlxtend as gzipped IDX files.

Usage:
    pip install mlxtend        # or point --csv at an extracted mnist_5k.csv.gz
    python scripts/make_mnist5k_idx.py --out data/
"""

import argparse
import gzip
import struct
from pathlib import Path

import numpy as np


def find_csv() -> Path:
    import mlxtend.data

    return Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--csv", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("data"))
    args = parser.parse_args()

    csv = args.csv or find_csv()
    with gzip.open(csv, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = len(labels)

    args.out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(args.out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(pixels.tobytes())
    with gzip.GzipFile(args.out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(f"wrote {n} images to {args.out}")


if __name__ == "__main__":
    main()
