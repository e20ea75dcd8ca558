"""Analytic multiply-accumulate and parameter counting over layer graphs.

Convention (tag ``hook-v1``), in the per-module hook style of common PyTorch
counters: convolutions count MACs plus one op per output for bias; dense
layers count in*out MACs; BatchNorm counts two ops per element; activations,
pooling and upsampling one op per output element; GDN/IGDN C^2 + 2C ops per spatial location. Functional ops (residual adds,
SE scaling, channel zero-padding) are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import prod
from typing import Iterable

import torch
from torch import nn

from .layers import (AvgPoolSpec, BatchNormSpec, ConvSpec, DenseSpec, GdnSpec,
                     GlobalAvgPoolSpec, LayerSpec, PReLUSpec, ReLUSpec, SigmoidSpec,
                     TransConvSpec, UpsampleSpec, spec_of)

CONVENTION = "hook-v1"


@dataclass
class LayerRecord:
    name: str
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


def trace_layers(model: nn.Module, input_shape: tuple[int, ...], prefix: str = "") -> list[LayerRecord]:
    """Run one eval-mode forward on zeros and record every primitive layer in call order."""
    records: list[LayerRecord] = []
    handles = []
    for name, module in model.named_modules():
        spec = spec_of(module)
        if spec is None:
            continue

        def hook(mod, args, out, name=name, spec=spec):
            records.append(LayerRecord(prefix + name, spec, tuple(args[0].shape[1:]), tuple(out.shape[1:])))

        handles.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros((1,) + tuple(input_shape)))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return records


def count_layer(spec: LayerSpec, out_shape: tuple[int, ...]) -> tuple[int, int]:
    """(MACs, trainable parameters) of one layer for one sample."""
    if not out_shape or any(int(s) <= 0 for s in out_shape):
        raise ValueError(f"unresolved output shape {out_shape} for {spec}")
    n = prod(out_shape)
    if isinstance(spec, ConvSpec):
        _, h, w = out_shape
        macs = spec.kernel ** 2 * spec.in_ch * spec.out_ch * h * w
        params = spec.kernel ** 2 * spec.in_ch * spec.out_ch
        if spec.bias:
            macs += spec.out_ch * h * w
            params += spec.out_ch
        return macs, params
    if isinstance(spec, TransConvSpec):
        _, h, w = out_shape
        hin, win = (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1
        macs = spec.kernel ** 2 * spec.in_ch * spec.out_ch * hin * win
        params = spec.kernel ** 2 * spec.in_ch * spec.out_ch
        if spec.bias:
            macs += spec.out_ch * h * w
            params += spec.out_ch
        return macs, params
    if isinstance(spec, DenseSpec):
        macs = spec.in_features * spec.out_features
        return macs, macs + (spec.out_features if spec.bias else 0)
    if isinstance(spec, BatchNormSpec):
        return 2 * n, 2 * spec.ch
    if isinstance(spec, PReLUSpec):
        return n, spec.ch
    if isinstance(spec, (ReLUSpec, SigmoidSpec, GlobalAvgPoolSpec, AvgPoolSpec, UpsampleSpec)):
        return n, 0
    if isinstance(spec, GdnSpec):
        c, h, w = out_shape
        return c * c * h * w + 2 * c * h * w, c * c + c
    raise TypeError(f"no counting rule for {spec!r}")


@dataclass
class MacRow:
    name: str
    layer: str
    out_shape: tuple[int, ...]
    macs: int
    params: int


@dataclass
class MacReport:
    rows: list[MacRow] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    @property
    def mparams(self) -> float:
        return self.total_params / 1e6

    def __add__(self, other: "MacReport") -> "MacReport":
        return MacReport(self.rows + other.rows, self.convention)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "out_shape", "macs", "params"])
        for r in self.rows:
            w.writerow([f"{r.name}:{r.layer}", "x".join(map(str, r.out_shape)), r.macs, r.params])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"total,{self.total_macs},{self.total_params},"
                f"gmacs={self.gmacs:.6f},mparams={self.mparams:.6f},convention={self.convention}")


def report_from_records(records: Iterable[LayerRecord]) -> MacReport:
    rows = []
    for rec in records:
        macs, params = count_layer(rec.spec, rec.out_shape)
        rows.append(MacRow(rec.name, type(rec.spec).__name__.removesuffix("Spec"), rec.out_shape, macs, params))
    return MacReport(rows)


def count_graph(model: nn.Module, input_shape: tuple[int, ...], prefix: str = "") -> MacReport:
    return report_from_records(trace_layers(model, input_shape, prefix))


def count_ondevice(front: nn.Module, encoder: nn.Module | None,
                   input_shape: tuple[int, ...] = (3, 32, 32)) -> MacReport:
    """MACs and parameters of the device half: front backbone + compression encoder."""
    report = count_graph(front, input_shape, "front.")
    if encoder is not None:
        was_training = front.training
        with torch.no_grad():
            feat_shape = tuple(front.eval()(torch.zeros((1,) + tuple(input_shape))).shape[1:])
        front.train(was_training)
        report = report + count_graph(encoder, feat_shape, "encoder.")
    return report


def manifest_text(model: nn.Module, input_shape: tuple[int, ...]) -> str:
    """One line per primitive layer: name, spec, input shape -> output shape."""
    lines = []
    for rec in trace_layers(model, input_shape):
        shape_in = "x".join(map(str, rec.in_shape))
        shape_out = "x".join(map(str, rec.out_shape))
        lines.append(f"{rec.name}\t{rec.spec}\t{shape_in} -> {shape_out}")
    return "\n".join(lines) + "\n"
