"""Binary weight files.

Layout (little-endian)::

    b"GZCNN1"
    u32  number of learnable layers
    per layer: u8 kind (1 conv, 2 fc, 3 softmax-out), u8 ndim, u32 dims[ndim],
               f32 weights[prod(dims)], f32 biases[dims[0]]
    u32  CRC-32 of all float payload bytes, in file order
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .network import LayerParams, NetworkState
from .spec import Conv, Fc, NetworkSpec, SoftmaxOut, param_shapes

MAGIC = b"GZCNN1"
_KIND = {Conv: 1, Fc: 2, SoftmaxOut: 3}


class WeightsError(ValueError):
    pass


class WeightsMagicError(WeightsError):
    pass


class WeightsChecksumError(WeightsError):
    pass


class WeightsShapeError(WeightsError):
    pass


def save_weights(state: NetworkState) -> bytes:
    header = bytearray(MAGIC)
    learn = [(layer, p) for layer, p in zip(state.spec.layers, state.params) if p is not None]
    header += struct.pack("<I", len(learn))
    body = bytearray()
    crc = 0
    for layer, p in learn:
        w = np.ascontiguousarray(p.w, dtype="<f4")
        b = np.ascontiguousarray(p.b, dtype="<f4")
        body += struct.pack("<BB", _KIND[type(layer)], w.ndim)
        body += struct.pack(f"<{w.ndim}I", *w.shape)
        payload = w.tobytes() + b.tobytes()
        crc = zlib.crc32(payload, crc)
        body += payload
    return bytes(header + body + struct.pack("<I", crc & 0xFFFFFFFF))


def load_weights(data: bytes, spec: NetworkSpec) -> NetworkState:
    if not data.startswith(MAGIC):
        raise WeightsMagicError("not a weight file (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightsError("truncated weight file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    expected = [(i, layer, s) for i, (layer, s) in enumerate(zip(spec.layers, param_shapes(spec)))
                if s is not None]
    if count != len(expected):
        raise WeightsShapeError(f"file has {count} learnable layers, spec has {len(expected)}")
    params: list[LayerParams | None] = [None] * len(spec.layers)
    crc = 0
    for i, layer, (wshape, bshape) in expected:
        kind, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if kind != _KIND[type(layer)] or tuple(dims) != tuple(wshape):
            raise WeightsShapeError(
                f"layer {i}: file has kind {kind} dims {dims}, spec expects "
                f"kind {_KIND[type(layer)]} dims {tuple(wshape)}")
        nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
        payload = take(4 * (nw + nb))
        crc = zlib.crc32(payload, crc)
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        params[i] = LayerParams(arr[:nw].reshape(wshape).copy(), arr[nw:].copy())
    (stored,) = struct.unpack("<I", take(4))
    if pos != len(data):
        raise WeightsError("trailing bytes after checksum")
    if stored != crc & 0xFFFFFFFF:
        raise WeightsChecksumError("checksum mismatch")
    velocity = [None if p is None else LayerParams(np.zeros_like(p.w), np.zeros_like(p.b))
                for p in params]
    return NetworkState(spec, params, velocity)
