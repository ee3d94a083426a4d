"""Image grids and binary PGM (P5) output."""

import math
from dataclasses import dataclass

import numpy as np

GUTTER = 2


@dataclass
class ImageGrid:
    rows: int
    cols: int
    cells: np.ndarray  # (rows * cols, side, side), values in [0, 1]

    def __post_init__(self):
        if self.rows * self.cols != len(self.cells):
            raise ValueError(f"{self.rows}x{self.cols} grid needs {self.rows * self.cols} cells, "
                             f"got {len(self.cells)}")


def grid_shape(n: int):
    """Near-square layout: ``cols = ceil(sqrt(n))``, just enough rows."""
    if n <= 0:
        return 0, 0
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def make_grid(images, side: int = 28) -> ImageGrid:
    """Lay images out row-major; missing cells are padded with black."""
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, side, side)
    rows, cols = grid_shape(len(imgs))
    cells = np.zeros((rows * cols, side, side))
    cells[:len(imgs)] = imgs
    return ImageGrid(rows, cols, cells)


def render(grid: ImageGrid, gutter: int = GUTTER) -> np.ndarray:
    """Pixel canvas with black gutters between cells (none around the border)."""
    side = grid.cells.shape[1]
    h = grid.rows * side + max(grid.rows - 1, 0) * gutter
    w = grid.cols * side + max(grid.cols - 1, 0) * gutter
    canvas = np.zeros((h, w))
    for k, cell in enumerate(grid.cells):
        r, c = divmod(k, grid.cols)
        y, x = r * (side + gutter), c * (side + gutter)
        canvas[y:y + side, x:x + side] = cell
    return canvas


def to_bytes(values) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(canvas) -> bytes:
    px = to_bytes(canvas)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_pgm(path, canvas):
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(canvas))


def read_pgm(path) -> np.ndarray:
    """Parse a binary P5 file with maxval 255 (comments allowed in the header)."""
    raw = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise ValueError("only 8-bit P5 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w)
