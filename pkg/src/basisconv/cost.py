"""Multiplication and learnable-parameter accounting for conv layers.

Only multiplications inside convolution stages are counted; additions and
biases are free.  For an input ``M x N x L``, filters ``D x D x L``:

* direct layer: ``P * L * D^2 * (M-D+1) * (N-D+1)``
* basis layer:  ``Q * (L * D^2 + P) * (M-D+1) * (N-D+1)``

With padding, ``M`` and ``N`` are the padded input sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .layer import BasisConvLayer, ConvLayer


@dataclass(frozen=True)
class LayerDims:
    M: int
    N: int
    L: int
    D: int
    P: int
    Q: int | None = None

    def __post_init__(self):
        for name in ("M", "N", "L", "D", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.D > min(self.M, self.N):
            raise ValueError(f"filter size {self.D} exceeds input {self.M}x{self.N}")
        if self.Q is not None and not 1 <= self.Q <= self.L * self.D * self.D:
            raise ValueError(f"Q={self.Q} outside [1, {self.L * self.D * self.D}]")

    @property
    def positions(self) -> int:
        return (self.M - self.D + 1) * (self.N - self.D + 1)


def direct_mults(d: LayerDims) -> int:
    return d.P * d.L * d.D * d.D * d.positions


def basis_mults(d: LayerDims) -> int:
    if d.Q is None:
        raise ValueError("basis_mults needs Q")
    return d.Q * (d.L * d.D * d.D + d.P) * d.positions


def mult_ratio(d: LayerDims) -> float:
    """Direct over basis multiplications, ``P L D^2 / (Q (L D^2 + P))``.

    Tends to ``P / Q`` once ``L D^2`` dwarfs ``P``.
    """
    n = d.L * d.D * d.D
    return (d.P * n) / (d.Q * (n + d.P))


def learnable_params(layer, include_biases=True) -> int:
    """Trainable scalars of a conv layer.

    Basis layers count ``P * Q`` coefficients plus the biases of both
    stages (Q on the basis stage, P on the 1x1 stage).
    """
    if isinstance(layer, ConvLayer):
        p, d, _, l = layer.weights.shape
        return p * l * d * d + (p if include_biases else 0)
    if isinstance(layer, BasisConvLayer):
        p, q = layer.coeffs.shape
        return p * q + (p + q if include_biases else 0)
    raise TypeError(f"not a conv layer: {type(layer).__name__}")


def stored_filter_scalars(layer) -> int:
    """Scalars needed to store the layer's filters (bases plus coefficients)."""
    if isinstance(layer, ConvLayer):
        return layer.weights.size
    return layer.basis.F.size + layer.coeffs.size


def layer_dims(layer, in_shape) -> LayerDims:
    m, n, l = in_shape
    m, n = m + 2 * layer.pad, n + 2 * layer.pad
    q = layer.q if isinstance(layer, BasisConvLayer) else None
    return LayerDims(m, n, l, layer.size, layer.out_channels, q)


@dataclass
class LayerCost:
    index: int
    kind: str
    dims: LayerDims | None
    mults: int
    params: int
    filter_scalars: int
    filters: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)
    fc_params: int = 0

    @property
    def total_mults(self) -> int:
        return sum(c.mults for c in self.layers)

    @property
    def conv_params(self) -> int:
        return sum(c.params for c in self.layers)

    @property
    def total_params(self) -> int:
        return self.conv_params + self.fc_params

    @property
    def filter_scalars(self) -> int:
        return sum(c.filter_scalars for c in self.layers)

    @property
    def filters(self) -> int:
        return sum(c.filters for c in self.layers)

    @property
    def gflops(self) -> float:
        return self.total_mults / 1e9


def model_cost_report(model, input_shape=None, include_biases=True) -> CostReport:
    """Per-conv-layer multiplications, learnable parameters and storage.

    ``filters`` is P for direct layers and Q for basis layers.
    """
    report = CostReport()
    if model is None:
        return report
    shape = tuple(input_shape) if input_shape is not None else model.input_shape
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (ConvLayer, BasisConvLayer)):
            d = layer_dims(layer, shape)
            basis = isinstance(layer, BasisConvLayer)
            report.layers.append(LayerCost(
                index=i, kind=layer.kind, dims=d,
                mults=basis_mults(d) if basis else direct_mults(d),
                params=learnable_params(layer, include_biases),
                filter_scalars=stored_filter_scalars(layer),
                filters=layer.q if basis else layer.out_channels,
            ))
        else:
            report.fc_params += sum(p.size for p in layer.params().values())
        shape = layer.output_shape(shape)
    return report
