"""BCNV binary model files.

Layout (all integers and scalars little-endian)::

    b"BCNV"  u32 version  u8 scalar width (4 = f32, 8 = f64)
    u32 M  u32 N  u32 L  (input shape)
    u32 layer count
    per layer: u8 type tag, dimension header, payload

    conv   (1): u32 P, D, L, pad | weights P x (L*D*D) in vectorization order, biases P
    basis  (2): u32 P, Q, D, L, pad, u8 origin (0 eigen, 1 random), u64 seed,
                u32 spectrum length r | F columns (Q x L*D*D), W (P x Q row-major),
                basis biases Q, biases P, eigenvalues r
    relu   (3): -
    maxpool(4): u32 window, stride
    fc     (5): u32 out, in | weights (out x in row-major), biases out
    softmax(6): -
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .basis import BasisSet
from .layer import BasisConvLayer, ConvLayer
from .network import FullyConnected, MaxPool, Model, ReLU, Softmax
from .tensor import bank_from_matrix, bank_matrix

MAGIC = b"BCNV"
VERSION = 1
WIDTHS = {"f32": 4, "f64": 8}
_DTYPES = {4: "<f4", 8: "<f8"}
TAGS = {"conv": 1, "basis": 2, "relu": 3, "maxpool": 4, "fc": 5, "softmax": 6}
ORIGINS = {"eigen": 0, "random": 1}


class ModelFormatError(ValueError):
    """The file is not a readable BCNV model."""


class _Writer:
    def __init__(self, fh, dtype):
        self.fh = fh
        self.dtype = dtype

    def u8(self, *v):
        self.fh.write(struct.pack(f"<{len(v)}B", *v))

    def u32(self, *v):
        self.fh.write(struct.pack(f"<{len(v)}I", *v))

    def u64(self, v):
        self.fh.write(struct.pack("<Q", v))

    def scalars(self, a):
        self.fh.write(np.ascontiguousarray(a, dtype=self.dtype).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0
        self.dtype = None

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFormatError("unexpected end of model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, n=1):
        v = struct.unpack(f"<{n}B", self.take(n))
        return v if n > 1 else v[0]

    def u32(self, n=1):
        v = struct.unpack(f"<{n}I", self.take(4 * n))
        return v if n > 1 else v[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def scalars(self, *shape):
        count = int(np.prod(shape))
        width = np.dtype(self.dtype).itemsize
        a = np.frombuffer(self.take(count * width), dtype=self.dtype)
        return a.astype(np.float64).reshape(shape)


def dump_model(model: Model, fh, width="f64") -> None:
    if width not in WIDTHS:
        raise ValueError(f"width must be one of {sorted(WIDTHS)}")
    w = _Writer(fh, _DTYPES[WIDTHS[width]])
    fh.write(MAGIC)
    w.u32(VERSION)
    w.u8(WIDTHS[width])
    w.u32(*model.input_shape)
    w.u32(len(model.layers))
    for layer in model.layers:
        w.u8(TAGS[layer.kind])
        if isinstance(layer, ConvLayer):
            p, d, _, l = layer.weights.shape
            w.u32(p, d, l, layer.pad)
            w.scalars(bank_matrix(layer.weights).T)
            w.scalars(layer.biases)
        elif isinstance(layer, BasisConvLayer):
            b = layer.basis
            eigs = b.eigenvalues if b.eigenvalues is not None else np.zeros(0)
            w.u32(layer.out_channels, b.q, b.size, b.channels, layer.pad)
            w.u8(ORIGINS[b.origin])
            w.u64(b.seed if b.seed is not None else 0)
            w.u32(len(eigs))
            w.scalars(b.F.T)
            w.scalars(layer.coeffs)
            w.scalars(layer.basis_bias)
            w.scalars(layer.biases)
            w.scalars(eigs)
        elif isinstance(layer, MaxPool):
            w.u32(layer.window, layer.stride)
        elif isinstance(layer, FullyConnected):
            w.u32(*layer.weights.shape)
            w.scalars(layer.weights)
            w.scalars(layer.biases)


def _read_layer(r: _Reader, tag):
    if tag == TAGS["conv"]:
        p, d, l, pad = r.u32(4)
        a = r.scalars(p, l * d * d).T
        return ConvLayer(bank_from_matrix(a, d, l), r.scalars(p), pad=pad)
    if tag == TAGS["basis"]:
        p, q, d, l, pad = r.u32(5)
        origin = r.u8()
        seed = r.u64()
        n_eigs = r.u32()
        if origin not in ORIGINS.values():
            raise ModelFormatError(f"unknown basis origin tag {origin}")
        f = r.scalars(q, l * d * d).T
        coeffs = r.scalars(p, q)
        basis_bias = r.scalars(q)
        biases = r.scalars(p)
        eigenvalues = r.scalars(n_eigs) if n_eigs else None
        name = "random" if origin == ORIGINS["random"] else "eigen"
        basis = BasisSet(f, d, l, origin=name,
                         seed=seed if name == "random" else None, eigenvalues=eigenvalues)
        return BasisConvLayer(basis, coeffs, biases, basis_bias, pad=pad)
    if tag == TAGS["relu"]:
        return ReLU()
    if tag == TAGS["maxpool"]:
        return MaxPool(*r.u32(2))
    if tag == TAGS["fc"]:
        n_out, n_in = r.u32(2)
        return FullyConnected(r.scalars(n_out, n_in), r.scalars(n_out))
    if tag == TAGS["softmax"]:
        return Softmax()
    raise ModelFormatError(f"unknown layer tag {tag}")


def parse_model(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ModelFormatError("bad magic: not a BCNV model file")
    version = r.u32()
    if version != VERSION:
        raise ModelFormatError(f"unsupported BCNV version {version}")
    width = r.u8()
    if width not in _DTYPES:
        raise ModelFormatError(f"unknown scalar width {width}")
    r.dtype = _DTYPES[width]
    input_shape = r.u32(3)
    count = r.u32()
    try:
        layers = [_read_layer(r, r.u8()) for _ in range(count)]
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent layer record: {exc}") from None
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after last layer")
    try:
        return Model(layers, input_shape)
    except ValueError as exc:
        raise ModelFormatError(f"layer shapes do not chain: {exc}") from None


def save_model(model: Model, path, width="f64") -> None:
    with open(path, "wb") as fh:
        dump_model(model, fh, width)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return parse_model(fh.read())


def model_bytes(model: Model, width="f64") -> bytes:
    buf = io.BytesIO()
    dump_model(model, buf, width)
    return buf.getvalue()


def describe_layer(layer, in_shape, out_shape):
    d = {"kind": layer.kind, "input": list(in_shape), "output": list(out_shape)}
    if isinstance(layer, ConvLayer):
        p, size, _, l = layer.weights.shape
        d.update(P=p, D=size, L=l, pad=layer.pad)
    elif isinstance(layer, BasisConvLayer):
        b = layer.basis
        d.update(P=layer.out_channels, Q=b.q, D=b.size, L=b.channels, pad=layer.pad,
                 origin=b.origin, frozen=layer.frozen)
        if b.seed is not None:
            d["seed"] = b.seed
    elif isinstance(layer, MaxPool):
        d.update(window=layer.window, stride=layer.stride)
    elif isinstance(layer, FullyConnected):
        d.update(out=layer.weights.shape[0], **{"in": layer.weights.shape[1]})
    return d


def manifest(model: Model) -> dict:
    """Human-readable shape summary written next to a model by ``--json-manifest``."""
    return {
        "format": "BCNV",
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "layers": [describe_layer(l, model.shapes[i], model.shapes[i + 1])
                   for i, l in enumerate(model.layers)],
    }


def write_manifest(model: Model, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest(model), fh, indent=2)
        fh.write("\n")
