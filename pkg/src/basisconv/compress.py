"""Whole-model compression and threshold sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

from .cost import model_cost_report
from .layer import BasisConvLayer, ConvLayer, to_basis_layer
from .network import Model, evaluate, finetune

log = logging.getLogger(__name__)

SWEEP_HEADER = ("t", "retained_pct", "Q_total", "P_total", "mults", "params",
                "acc_before", "acc_after")


def compress_model(model: Model, t: float | None = 1.0, q_per_layer=None):
    """Replace every direct conv layer by a truncated eigen-basis layer.

    ``q_per_layer`` (one Q per conv layer, in order) overrides ``t``.

    Returns:
        (compressed copy, list of LayerReport)
    """
    convs = [i for i, l in enumerate(model.layers) if isinstance(l, ConvLayer)]
    if not convs:
        raise ValueError("model has no convolution layers to compress")
    if q_per_layer is not None and len(q_per_layer) != len(convs):
        raise ValueError(f"expected {len(convs)} Q values, got {len(q_per_layer)}")
    out = model.copy()
    reports = []
    for k, i in enumerate(convs):
        q = None if q_per_layer is None else q_per_layer[k]
        out.layers[i], rep = to_basis_layer(out.layers[i], t=t, q=q)
        reports.append(rep)
    return Model(out.layers, out.input_shape), reports


def retained_percent(model: Model) -> tuple[float, int, int]:
    """100 * sum(Q) / sum(P) over the conv stages, with both totals."""
    q_total = p_total = 0
    for layer in model.layers:
        if isinstance(layer, BasisConvLayer):
            q_total += layer.q
            p_total += layer.out_channels
        elif isinstance(layer, ConvLayer):
            q_total += layer.out_channels
            p_total += layer.out_channels
    return 100.0 * q_total / p_total, q_total, p_total


@dataclass
class SweepRow:
    t: float
    retained_pct: float
    Q_total: int
    P_total: int
    mults: int
    params: int
    acc_before: float
    acc_after: float | None = None

    def as_csv(self):
        return [repr(self.t), f"{self.retained_pct:.4f}", str(self.Q_total), str(self.P_total),
                str(self.mults), str(self.params), f"{self.acc_before:.6f}",
                "" if self.acc_after is None else f"{self.acc_after:.6f}"]

    @classmethod
    def from_csv(cls, row):
        return cls(float(row["t"]), float(row["retained_pct"]), int(row["Q_total"]),
                   int(row["P_total"]), int(row["mults"]), int(row["params"]),
                   float(row["acc_before"]),
                   float(row["acc_after"]) if row["acc_after"] else None)


def sweep(model: Model, test_data, t_list, train_data=None, scale=None, seed=0):
    """One :class:`SweepRow` per threshold, each compressing the original model.

    Fine-tuning runs only when both ``train_data`` and ``scale`` are given.
    """
    t_list = list(t_list)
    if not t_list:
        raise ValueError("empty threshold list")
    rows = []
    for t in t_list:
        compressed, _ = compress_model(model, t=t)
        pct, q_total, p_total = retained_percent(compressed)
        cost = model_cost_report(compressed)
        row = SweepRow(t, pct, q_total, p_total, cost.total_mults, cost.conv_params,
                       evaluate(compressed, test_data))
        if train_data is not None and scale is not None:
            finetune(compressed, train_data, scale=scale, seed=seed)
            row.acc_after = evaluate(compressed, test_data)
        log.info("t=%g retained=%.1f%% acc_before=%.4f acc_after=%s", t, pct,
                 row.acc_before, row.acc_after)
        rows.append(row)
    return rows


def write_sweep_csv(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(r.as_csv())


def read_sweep_csv(fh):
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
        raise ValueError(f"unexpected sweep header {reader.fieldnames}")
    return [SweepRow.from_csv(r) for r in reader]
