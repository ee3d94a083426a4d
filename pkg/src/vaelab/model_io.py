"""Binary model files.

Layout (all little-endian)::

    b"VAES"                      magic
    u32 version                  currently 1
    u32 n_body, u32 n_decoder    encoder hidden layer count, decoder layer count
    (n_body + 2 + n_decoder) x   per layer, in order body, mu head, logvar head, decoder:
        u32 in, u32 out, u32 activation code (0 identity, 1 relu, 2 sigmoid)
    float64 blocks               per layer in the same order: W (out x in, row-major), then b
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import VaeModel
from .nn import ACTIVATIONS, DenseLayer

MAGIC = b"VAES"
VERSION = 1


def model_bytes(model: VaeModel) -> bytes:
    layers = model.layers()
    parts = [MAGIC, struct.pack("<III", VERSION, len(model.encoder_body), len(model.decoder))]
    for layer in layers:
        parts.append(struct.pack("<III", layer.in_size, layer.out_size,
                                 ACTIVATIONS.index(layer.activation)))
    for layer in layers:
        parts.append(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_model(model: VaeModel, path) -> None:
    Path(path).write_bytes(model_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated model file while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32s(self, k: int, what: str):
        return struct.unpack(f"<{k}I", self.take(4 * k, what))


def parse_model(raw: bytes) -> VaeModel:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a VAES model file", 0)
    (version,) = r.u32s(1, "version")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    n_body, n_dec = r.u32s(2, "layer counts")
    specs = []
    for i in range(n_body + 2 + n_dec):
        at = r.pos
        n_in, n_out, code = r.u32s(3, f"layer {i} header")
        if code >= len(ACTIVATIONS) or n_in == 0 or n_out == 0:
            raise FormatError(f"invalid header for layer {i}", at)
        specs.append((n_in, n_out, ACTIVATIONS[code]))
    layers = []
    for i, (n_in, n_out, act) in enumerate(specs):
        W = np.frombuffer(r.take(8 * n_in * n_out, f"layer {i} weights"), dtype="<f8")
        b = np.frombuffer(r.take(8 * n_out, f"layer {i} bias"), dtype="<f8")
        layers.append(DenseLayer(W.reshape(n_out, n_in).astype(np.float64),
                                 b.astype(np.float64), act))
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after parameters", r.pos)
    body = layers[:n_body]
    try:
        return VaeModel(body, layers[n_body], layers[n_body + 1], layers[n_body + 2:])
    except ValueError as exc:
        raise FormatError(f"inconsistent architecture: {exc}") from None


def load_model(path) -> VaeModel:
    return parse_model(Path(path).read_bytes())
