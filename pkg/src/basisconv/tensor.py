"""Dense arrays and the convolution primitives.

Activations are numpy arrays laid out ``(rows, cols, channels)``; every
primitive also accepts a leading batch axis ``(batch, rows, cols, channels)``.
A filter bank stores its weights as ``(P, D, D, L)``.

All convolutions are valid-mode cross-correlations with stride 1 (no kernel
flip). Filters are vectorized channel-major, then row, then column, so that
``vec[l * D * D + i * D + j] == h[i, j, l]``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "FilterBank",
    "ShapeError",
    "MultCounter",
    "count_mults",
    "conv_valid",
    "conv_bank",
    "conv_1x1",
    "vectorize",
    "devectorize",
    "bank_matrix",
    "bank_from_matrix",
    "im2col",
    "col2im",
    "pad_spatial",
]


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


@dataclass
class MultCounter:
    """Tally of scalar multiplications performed by the conv primitives."""

    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_active_counters: list[MultCounter] = []


@contextlib.contextmanager
def count_mults():
    """Count multiplications executed by conv primitives inside the block.

    >>> with count_mults() as c:
    ...     _ = conv_valid(np.ones((3, 3, 1)), np.ones((2, 2, 1)))
    >>> c.total
    16
    """
    counter = MultCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _tally(op: str, n: int) -> None:
    for c in _active_counters:
        c.add(op, int(n))


@dataclass(frozen=True)
class FilterBank:
    """P filters of shape ``(D, D, L)`` plus one bias per filter."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.biases)
        if w.ndim != 4 or w.shape[1] != w.shape[2]:
            raise ShapeError(f"filter bank weights must be (P, D, D, L), got {w.shape}")
        if w.shape[0] < 1:
            raise ShapeError("filter bank needs at least one filter")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"expected {w.shape[0]} biases, got shape {b.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.shape[1]

    @property
    def channels(self) -> int:
        return self.weights.shape[3]

    def __len__(self):
        return self.count

    def __getitem__(self, k):
        return self.weights[k]


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (M, N, L) or (B, M, N, L) input, got shape {x.shape}")


def vectorize(h) -> np.ndarray:
    """Flatten a ``(D, D, L)`` filter into its length ``L*D*D`` vector."""
    h = np.asarray(h)
    if h.ndim != 3 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"filter must be (D, D, L), got {h.shape}")
    return h.transpose(2, 0, 1).reshape(-1)


def devectorize(v, size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != size * size * channels:
        raise ShapeError(
            f"vector of length {v.shape} does not match D={size}, L={channels}"
        )
    return v.reshape(channels, size, size).transpose(1, 2, 0)


def bank_matrix(weights) -> np.ndarray:
    """Stack vectorized filters ``(P, D, D, L)`` as columns, shape ``(L*D*D, P)``."""
    weights = np.asarray(weights)
    p = weights.shape[0]
    return weights.transpose(0, 3, 1, 2).reshape(p, -1).T


def bank_from_matrix(a, size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`bank_matrix`."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != size * size * channels:
        raise ShapeError(f"matrix of shape {a.shape} does not match D={size}, L={channels}")
    return a.T.reshape(a.shape[1], channels, size, size).transpose(0, 2, 3, 1)


def pad_spatial(x, pad: int) -> np.ndarray:
    """Zero-pad the two spatial axes of a batch ``(B, M, N, L)``."""
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def im2col(x, size: int) -> np.ndarray:
    """Patch matrix of a batch.

    Returns an array of shape ``(B, M-D+1, N-D+1, L*D*D)`` whose last axis is
    each window in vectorization order.
    """
    b, m, n, l = x.shape
    if size > m or size > n:
        raise ShapeError(f"filter size {size} larger than input {m}x{n}")
    win = sliding_window_view(x, (size, size), axis=(1, 2))  # (B, M', N', L, D, D)
    return win.reshape(b, m - size + 1, n - size + 1, l * size * size)


def col2im(cols, size: int, in_shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    b, m, n, l = in_shape
    mo, no = m - size + 1, n - size + 1
    cols = cols.reshape(b, mo, no, l, size, size)
    out = np.zeros(in_shape, dtype=cols.dtype)
    for i in range(size):
        for j in range(size):
            out[:, i:i + mo, j:j + no, :] += cols[..., i, j]
    return out


def _per_channel(cols, a) -> np.ndarray:
    # one matvec per output channel so every primitive rounds identically
    flat = np.ascontiguousarray(cols).reshape(-1, cols.shape[-1])
    out = np.empty((flat.shape[0], a.shape[1]), dtype=np.result_type(flat, a))
    for k in range(a.shape[1]):
        out[:, k] = flat @ np.ascontiguousarray(a[:, k])
    return out.reshape(*cols.shape[:-1], a.shape[1])


def conv_valid(x, h) -> np.ndarray:
    """Valid cross-correlation of ``x`` with one filter ``h`` of shape ``(D, D, L)``."""
    xb, single = _as_batch(x)
    h = np.asarray(h)
    if h.ndim != 3 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"filter must be (D, D, L), got {h.shape}")
    if h.shape[2] != xb.shape[3]:
        raise ShapeError(f"channel mismatch: input has {xb.shape[3]}, filter has {h.shape[2]}")
    cols = im2col(xb, h.shape[0])
    _tally("conv_valid", cols.size)
    out = _per_channel(cols, vectorize(h)[:, None])[..., 0]
    return out[0] if single else out


def conv_bank(x, bank: FilterBank | np.ndarray, biases=None) -> np.ndarray:
    """Apply every filter of a bank; channel ``k`` is filter ``k``'s map plus its bias.

    ``bank`` may be a :class:`FilterBank` or a raw ``(P, D, D, L)`` weight array
    (in which case ``biases`` defaults to zeros).
    """
    if isinstance(bank, FilterBank):
        weights, biases = bank.weights, bank.biases if biases is None else biases
    else:
        weights = np.asarray(bank)
    xb, single = _as_batch(x)
    if weights.ndim != 4:
        raise ShapeError(f"bank weights must be (P, D, D, L), got {weights.shape}")
    p, d, _, l = weights.shape
    if l != xb.shape[3]:
        raise ShapeError(f"channel mismatch: input has {xb.shape[3]}, filters have {l}")
    cols = im2col(xb, d)
    _tally("conv_bank", cols.size * p)
    out = _per_channel(cols, bank_matrix(weights))
    if biases is not None:
        out = out + np.asarray(biases)
    return out[0] if single else out


def conv_1x1(z, w, biases=None) -> np.ndarray:
    """Pointwise channel mixing: ``out[..., k] = sum_q w[k, q] * z[..., q] + biases[k]``."""
    zb, single = _as_batch(z)
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[1] != zb.shape[3]:
        raise ShapeError(f"coefficients {w.shape} do not match {zb.shape[3]} input channels")
    _tally("conv_1x1", zb[..., 0].size * w.size)
    out = _per_channel(zb, w.T)
    if biases is not None:
        biases = np.asarray(biases)
        if biases.shape != (w.shape[0],):
            raise ShapeError(f"expected {w.shape[0]} biases, got {biases.shape}")
        out = out + biases
    return out[0] if single else out
