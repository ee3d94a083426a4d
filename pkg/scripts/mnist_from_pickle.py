"""Rebuild the official MNIST IDX files from the classic ``mnist.pkl.gz`` pickle.

The pickle stores pixels as ``byte / 256`` in float32, so the original bytes are
recovered exactly. Train and validation splits are concatenated back into the
60000-image official training set (same order).

Usage::

    pip download --no-deps mnist-hub -d /tmp/mnist-hub
    python scripts/mnist_from_pickle.py /tmp/mnist-hub/mnist_hub-*.whl data/mnist

The first argument may be the ``mnist.pkl.gz`` file itself or a wheel/zip
containing it.
"""

import gzip
import io
import pickle
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def _read_pickle(src: Path):
    if zipfile.is_zipfile(src):
        with zipfile.ZipFile(src) as zf:
            name = next(n for n in zf.namelist() if n.endswith("mnist.pkl.gz"))
            raw = zf.read(name)
    else:
        raw = src.read_bytes()
    with gzip.open(io.BytesIO(raw)) as fh:
        return pickle.load(fh, encoding="latin1")


def _to_bytes(x):
    b = np.round(np.asarray(x, dtype=np.float64) * 256.0)
    if not np.allclose(b, np.asarray(x, dtype=np.float64) * 256.0):
        raise ValueError("pixels are not multiples of 1/256")
    return b.astype(np.uint8)


def _write(path: Path, magic: int, dims, payload: np.ndarray):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + payload.tobytes())


def main(argv):
    src, out = Path(argv[1]), Path(argv[2])
    out.mkdir(parents=True, exist_ok=True)
    (tx, ty), (vx, vy), (sx, sy) = _read_pickle(src)
    splits = {
        "train": (np.concatenate([tx, vx]), np.concatenate([ty, vy])),
        "t10k": (sx, sy),
    }
    for prefix, (x, y) in splits.items():
        _write(out / f"{prefix}-images-idx3-ubyte.gz", 0x803, (len(x), 28, 28), _to_bytes(x))
        _write(out / f"{prefix}-labels-idx1-ubyte.gz", 0x801, (len(y),), np.asarray(y, dtype=np.uint8))
        print(f"{prefix}: {len(x)} images -> {out}")


if __name__ == "__main__":
    main(sys.argv)
