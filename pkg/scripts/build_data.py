"""Rebuild the dataset files bundled in ``src/noisereg/data_files``.

Sources (both redistributable, fetched from package mirrors):

* ``mnist10k-*-idx*-ubyte.gz``: the 10 000 MNIST digits shipped in the npm
  package ``mnist`` (1.1.0, ``src/digits/<d>.json``), converted back to
  8-bit pixels and written as standard big-endian IDX files.
* ``adult.csv.gz``: UCI Adult (``adult.data`` + ``adult.test``, 48 842 rows)
  as shipped in the PyPI wheel ``responsibly`` 0.1.2. Fields are stripped,
  the trailing ``.`` on test labels removed, and a header line added.

Usage::

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    pip download responsibly==0.1.2 --no-deps
    python build_data.py package/src/digits responsibly-0.1.2-py3-none-any.whl
"""

import gzip
import json
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent.parent / "src" / "noisereg" / "data_files"

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country", "income",
]


def build_mnist(digits_dir: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((digits_dir / f"{digit}.json").read_text())["data"])
        pixels = np.rint(flat.reshape(-1, 784) * 255).clip(0, 255).astype(np.uint8)
        images.append(pixels)
        labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    X = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(y))
    X, y = X[order], y[order]
    with gzip.GzipFile(HERE / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(X), 28, 28))
        fh.write(X.tobytes())
    with gzip.GzipFile(HERE / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(y)))
        fh.write(y.tobytes())


def build_adult(wheel: Path) -> None:
    rows = []
    with zipfile.ZipFile(wheel) as zf:
        for member in ("adult.data", "adult.test"):
            text = zf.read(f"responsibly/dataset/adult/{member}").decode()
            for line in text.splitlines():
                if not line.strip() or line.startswith("|"):
                    continue
                fields = [f.strip() for f in line.split(",")]
                fields[-1] = fields[-1].rstrip(".")
                rows.append(",".join(fields))
    with gzip.GzipFile(HERE / "adult.csv.gz", "wb", mtime=0) as fh:
        fh.write((",".join(ADULT_COLUMNS) + "\n" + "\n".join(rows) + "\n").encode())


if __name__ == "__main__":
    build_mnist(Path(sys.argv[1]))
    build_adult(Path(sys.argv[2]))
