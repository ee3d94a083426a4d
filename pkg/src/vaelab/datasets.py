"""MNIST IDX reading/writing, the synthetic counting-tiles images, minibatching."""

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, GenerationError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        if self.images.ndim != 2 or len(self.images) == 0:
            raise ValueError(f"images must be a non-empty (n, d) array, got {self.images.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.images[:n], labels, self.name)

    def fingerprint(self) -> dict:
        h = hashlib.sha256(self.images.tobytes())
        if self.labels is not None:
            h.update(np.asarray(self.labels, dtype=np.int64).tobytes())
        return {"name": self.name, "count": len(self), "sha256": h.hexdigest()}


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}") from None
    return raw


def parse_idx(raw: bytes, expected_magic: int, what: str = "idx"):
    """Return the uint8 payload of an IDX buffer, reshaped to its header dims."""
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for magic number", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{what}: truncated header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header_end != count:
        raise FormatError(
            f"{what}: payload has {len(raw) - header_end} bytes, header declares {count}",
            min(len(raw), header_end + count),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path=None, name: str = "mnist") -> Dataset:
    """Load an IDX image file (and optional label file); ``.gz`` content is detected."""
    imgs = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    n = imgs.shape[0]
    images = imgs.reshape(n, -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path)).astype(np.int64)
        if len(labels) != n:
            raise FormatError(f"label count {len(labels)} does not match image count {n}")
    return Dataset(images, labels, name)


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    """Load ``{split}-images-idx3-ubyte[.gz]`` and its labels from ``directory``."""
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]
    d = Path(directory)

    def find(stem):
        for cand in (d / stem, d / f"{stem}.gz"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"{stem}[.gz] not found in {d}")

    return load_mnist_idx(find(f"{prefix}-images-idx3-ubyte"),
                          find(f"{prefix}-labels-idx1-ubyte"), name=f"mnist-{prefix}")


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    a = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()


def write_idx(dataset: Dataset, images_path, labels_path=None, side: int = 28):
    """Export a dataset in the MNIST IDX layout (pixels rounded to bytes)."""
    px = np.round(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), side, side)
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "wb") as fh:
        fh.write(idx_bytes(px, IMAGE_MAGIC))
    if labels_path is not None and dataset.labels is not None:
        opener = gzip.open if str(labels_path).endswith(".gz") else open
        with opener(labels_path, "wb") as fh:
            fh.write(idx_bytes(dataset.labels, LABEL_MAGIC))


@dataclass(frozen=True)
class TileSpec:
    image_side: int = 28
    tile_side: int = 4
    min_tiles: int = 1
    max_tiles: int = 3
    allow_overlap: bool = False

    def validate(self):
        if not 0 < self.tile_side <= self.image_side:
            raise ValueError("tile_side must be in (0, image_side]")
        if not 1 <= self.min_tiles <= self.max_tiles:
            raise ValueError("need 1 <= min_tiles <= max_tiles")
        return self


def _clashes(a, b, t):
    # overlapping or sharing an edge (would merge 4-connected components)
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dx <= t and dy < t) or (dx < t and dy <= t)


def gen_tiles(n: int, spec: TileSpec, rng, max_retries: int = 1000) -> Dataset:
    """``n`` black images with ``k ~ U{min..max}`` white ``tile_side`` squares each.

    Corners are uniform on the grid; a candidate that overlaps or edge-touches an
    already placed tile is redrawn. Labels are the tile counts.
    """
    spec.validate()
    side, t = spec.image_side, spec.tile_side
    images = np.zeros((n, side, side))
    counts = rng.integers(spec.min_tiles, spec.max_tiles, n)
    hi = side - t
    for i in range(n):
        placed = []
        for _ in range(counts[i]):
            for _ in range(max_retries):
                pos = tuple(int(v) for v in rng.integers(0, hi, 2))
                if spec.allow_overlap or not any(_clashes(pos, q, t) for q in placed):
                    break
            else:
                raise GenerationError(f"could not place tile {len(placed) + 1} in image {i}")
            placed.append(pos)
            images[i, pos[0]:pos[0] + t, pos[1]:pos[1] + t] = 1.0
    return Dataset(images.reshape(n, side * side), counts.astype(np.int64), "tiles")


def minibatches(dataset, batch_size: int, rng) -> list:
    """One epoch of shuffled index batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
