#!/usr/bin/env python3
"""Rebuild data/mnist5k-*-ubyte.gz from the MNIST subset shipped in the mlxtend wheel.

The wheel bundles mlxtend/data/data/mnist_5k.csv.gz: 5000 rows of 784 pixel
values followed by the label, 500 images per class, sorted by label. The rows
are written unchanged as an IDX image/label pair. Gzip headers carry mtime 0 so
the output is byte-reproducible.

    pip download --no-deps mlxtend==0.24.0 -d /tmp/wheel
    python3 tools/make_mnist_subset.py /tmp/wheel/mlxtend-0.24.0-py3-none-any.whl data
"""

import argparse
import gzip
import pathlib
import struct
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=pathlib.Path, help="mlxtend 0.24.0 wheel")
    parser.add_argument("out_dir", type=pathlib.Path, help="destination directory")
    args = parser.parse_args()

    with zipfile.ZipFile(args.wheel) as z:
        rows = gzip.decompress(z.read(MEMBER)).decode().splitlines()
    images, labels = bytearray(), bytearray()
    for row in rows:
        values = [int(float(t)) for t in row.split(",")]
        if len(values) != 785:
            raise SystemExit(f"unexpected row width {len(values)}")
        images += bytes(values[:-1])
        labels.append(values[-1])

    n = len(rows)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(args.out_dir / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28) + images)
    with gzip.GzipFile(args.out_dir / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images, classes {sorted(set(labels))}")


if __name__ == "__main__":
    main()
