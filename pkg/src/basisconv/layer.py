"""Direct convolution layers, BasisConv layers and conversion between them.

A BasisConv layer runs two stages: a frozen bank of Q basis filters, then a
trainable 1x1 stage mixing the Q maps into P outputs.  Both layer kinds
operate on batches ``(B, M, N, L)`` and support an optional zero padding
applied to the input before the valid convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import basis as bs
from .tensor import (
    FilterBank,
    ShapeError,
    _tally,
    bank_matrix,
    col2im,
    conv_1x1,
    conv_bank,
    im2col,
    pad_spatial,
)

__all__ = [
    "ConvLayer",
    "BasisConvLayer",
    "LayerReport",
    "to_basis_layer",
    "forward_basis",
    "effective_filters",
]


def _conv_out_shape(in_shape, size, channels, pad, name):
    m, n, l = in_shape
    if l != channels:
        raise ShapeError(f"{name}: input has {l} channels, filters expect {channels}")
    m, n = m + 2 * pad, n + 2 * pad
    if size > min(m, n):
        raise ShapeError(f"{name}: filter size {size} larger than input {m}x{n}")
    return m - size + 1, n - size + 1


@dataclass(eq=False)
class ConvLayer:
    """Conventional convolution: ``weights`` is ``(P, D, D, L)``."""

    weights: np.ndarray
    biases: np.ndarray
    pad: int = 0
    kind = "conv"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        FilterBank(self.weights, self.biases)  # shape validation
        self.grads = {}
        self._cache = None

    @classmethod
    def from_bank(cls, bank: FilterBank, pad: int = 0):
        return cls(bank.weights.copy(), bank.biases.copy(), pad)

    @property
    def bank(self) -> FilterBank:
        return FilterBank(self.weights, self.biases)

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def size(self):
        return self.weights.shape[1]

    @property
    def in_channels(self):
        return self.weights.shape[3]

    def output_shape(self, in_shape):
        mo, no = _conv_out_shape(in_shape, self.size, self.in_channels, self.pad, "conv")
        return mo, no, self.out_channels

    def params(self):
        return {"weights": self.weights, "biases": self.biases}

    def trainable(self, phase="all"):
        return {"all": ("weights", "biases"), "coeffs_only": (),
                "non_conv_only": ("biases",)}[phase]

    def forward(self, x, train=False):
        xp = pad_spatial(x, self.pad)
        cols = im2col(xp, self.size)
        a = bank_matrix(self.weights)
        _tally("conv_bank", cols.size * a.shape[1])
        if train:
            self._cache = (cols, xp.shape)
        return cols @ a + self.biases

    def backward(self, dout, need_input_grad=True):
        cols, xp_shape = self._cache
        p, d, _, l = self.weights.shape
        g = dout.reshape(-1, p)
        da = cols.reshape(-1, cols.shape[-1]).T @ g
        self.grads = {
            "weights": da.T.reshape(p, l, d, d).transpose(0, 2, 3, 1),
            "biases": g.sum(axis=0),
        }
        self._cache = None
        if not need_input_grad:
            return None
        dx = col2im(g @ bank_matrix(self.weights).T, d, xp_shape)
        if self.pad:
            dx = dx[:, self.pad:-self.pad, self.pad:-self.pad, :]
        return dx


@dataclass(eq=False)
class BasisConvLayer:
    """Frozen basis bank followed by a trainable 1x1 combination stage.

    ``coeffs`` is ``(P, Q)``; ``biases`` (length P) sit on the 1x1 stage.
    ``basis_bias`` (length Q) is an optional bias on the basis stage, zero
    for compressed layers.
    """

    basis: bs.BasisSet
    coeffs: np.ndarray
    biases: np.ndarray
    basis_bias: np.ndarray | None = None
    pad: int = 0
    kind = "basis"
    frozen = True

    def __post_init__(self):
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.basis_bias is None:
            self.basis_bias = np.zeros(self.basis.q)
        self.basis_bias = np.asarray(self.basis_bias, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != self.basis.q:
            raise ShapeError(f"coefficients {self.coeffs.shape} do not match Q={self.basis.q}")
        if self.biases.shape != (self.coeffs.shape[0],):
            raise ShapeError(f"expected {self.coeffs.shape[0]} biases, got {self.biases.shape}")
        if self.basis_bias.shape != (self.basis.q,):
            raise ShapeError(f"expected {self.basis.q} basis biases, got {self.basis_bias.shape}")
        self.grads = {}
        self._cache = None

    @property
    def out_channels(self):
        return self.coeffs.shape[0]

    @property
    def q(self):
        return self.basis.q

    @property
    def size(self):
        return self.basis.size

    @property
    def in_channels(self):
        return self.basis.channels

    def output_shape(self, in_shape):
        mo, no = _conv_out_shape(in_shape, self.size, self.in_channels, self.pad, "basis conv")
        return mo, no, self.out_channels

    def params(self):
        return {"coeffs": self.coeffs, "biases": self.biases, "basis_bias": self.basis_bias}

    def trainable(self, phase="all"):
        return {"all": ("coeffs", "biases", "basis_bias"),
                "coeffs_only": ("coeffs", "biases", "basis_bias"),
                "non_conv_only": ("biases", "basis_bias")}[phase]

    def forward(self, x, train=False):
        xp = pad_spatial(x, self.pad)
        cols = im2col(xp, self.size)
        _tally("conv_bank", cols.size * self.q)
        z = cols @ self.basis.F + self.basis_bias
        if train:
            self._cache = (cols, z, xp.shape)
        _tally("conv_1x1", z[..., 0].size * self.coeffs.size)
        return z @ self.coeffs.T + self.biases

    def backward(self, dout, need_input_grad=True):
        cols, z, xp_shape = self._cache
        g = dout.reshape(-1, dout.shape[-1])
        zf = z.reshape(-1, z.shape[-1])
        dz = g @ self.coeffs
        self.grads = {
            "coeffs": g.T @ zf,
            "biases": g.sum(axis=0),
            "basis_bias": dz.sum(axis=0),
        }
        self._cache = None
        if not need_input_grad:
            return None
        dx = col2im(dz @ self.basis.F.T, self.size, xp_shape)
        if self.pad:
            dx = dx[:, self.pad:-self.pad, self.pad:-self.pad, :]
        return dx


@dataclass
class LayerReport:
    P: int
    Q: int
    D: int
    L: int
    retained_fraction: float
    recon_error: float
    eigenvalues: np.ndarray = field(repr=False, default=None)


def to_basis_layer(conv: ConvLayer, t: float | None = 1.0, q: int | None = None):
    """Replace a direct layer with its truncated eigen-basis equivalent.

    Q is chosen by the eigenvalue-mass threshold ``t`` unless ``q`` forces it
    (clamped to the bank's numeric rank).

    Returns:
        (BasisConvLayer, LayerReport)
    """
    fm = bs.build_filter_matrix(conv.bank)
    spectrum = bs.eigen_decompose(fm)
    if q is None:
        q = bs.select_q(spectrum, t)
    else:
        if q < 1:
            raise ValueError(f"Q must be at least 1, got {q}")
        q = min(int(q), len(spectrum))
    basis = bs.truncate(spectrum, q)
    coeffs = bs.project_weights(basis, conv.bank)
    a = fm.A
    resid = a - basis.F @ coeffs.T
    report = LayerReport(
        P=conv.out_channels, Q=q, D=conv.size, L=conv.in_channels,
        retained_fraction=float(spectrum.eigenvalues[:q].sum() / spectrum.total),
        recon_error=float(np.linalg.norm(resid) / np.linalg.norm(a)),
        eigenvalues=spectrum.eigenvalues,
    )
    layer = BasisConvLayer(basis, coeffs, conv.biases.copy(), pad=conv.pad)
    return layer, report


def forward_basis(layer: BasisConvLayer, x) -> np.ndarray:
    """Two-stage forward pass: basis bank (basis bias only), then the 1x1 mix."""
    xb = np.asarray(x)
    single = xb.ndim == 3
    if single:
        xb = xb[None]
    xb = pad_spatial(xb, layer.pad)
    if xb.shape[-1] != layer.in_channels:
        raise ShapeError(f"input has {xb.shape[-1]} channels, layer expects {layer.in_channels}")
    z = conv_bank(xb, layer.basis.filters(), layer.basis_bias)
    y = conv_1x1(z, layer.coeffs, layer.biases)
    return y[0] if single else y


def effective_filters(layer: BasisConvLayer) -> FilterBank:
    """Direct-convolution bank computing the same map as ``layer``."""
    bank = bs.reconstruct(layer.basis, layer.coeffs)
    return FilterBank(bank.weights, layer.biases + layer.coeffs @ layer.basis_bias)
