"""Analytic complexity accounting and derived efficiency figures.

One MAC is one multiply-accumulate. Only dense kernels (convolutions,
including the 1x1 adaptor/discriminator layers) carry MACs; pooling, resize,
activations and residual adds are tallied separately as element operations
because they contribute no multiply-accumulate work. The efficiency report is
pure arithmetic on supplied measurements; nothing here touches hardware.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .graph import build_graph

DEFAULT_REFERENCE_PARAMS = 24_900_000  # full-scale reference model for the ratio


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    out_shape: tuple[int, int, int, int]
    weight_params: int
    bias_params: int
    macs: int
    element_ops: int

    @property
    def params(self) -> int:
        return self.weight_params + self.bias_params


@dataclass(frozen=True)
class EfficiencyReport:
    macs: int
    latency_s: float
    energy_j: float
    fps: float
    gmac_per_s: float
    gmac_per_j: float


@dataclass(frozen=True)
class ComplexityReport:
    rows: tuple[LayerRow, ...]
    reference_params: int = DEFAULT_REFERENCE_PARAMS
    stage_order: tuple[str, ...] = ("backbone", "patchmaker", "adaptor", "discriminator")
    notes: tuple[str, ...] = field(default_factory=tuple)

    def _stage(self, row: LayerRow) -> str:
        return row.name.split(".", 1)[0]

    @property
    def stage_subtotals(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for row in self.rows:
            stage = self._stage(row)
            bucket = out.setdefault(stage, {"params": 0, "macs": 0, "element_ops": 0})
            bucket["params"] += row.params
            bucket["macs"] += row.macs
            bucket["element_ops"] += row.element_ops
        return out

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_element_ops(self) -> int:
        return sum(r.element_ops for r in self.rows)

    @property
    def backbone_conv_params(self) -> int:
        """Kernel weights only (no biases) of the extractor convolutions."""
        return sum(r.weight_params for r in self.rows
                   if r.kind == "conv" and self._stage(r) == "backbone")

    @property
    def compression(self) -> float:
        return compression_ratio(self.total_params, self.reference_params)


def count(model, reference_params: int = DEFAULT_REFERENCE_PARAMS) -> ComplexityReport:
    """Per-layer parameter/MAC table for a DetectorModel at its input size."""
    graph = build_graph(model, batch=1)
    rows: list[LayerRow] = []
    for node in graph.nodes:
        if node.kind == "input":
            continue
        n, c, h, w = node.out_shape
        elems = n * c * h * w
        weight_params = bias_params = macs = element_ops = 0
        if node.kind == "conv":
            spec = node.conv
            weight_params = spec.weights.size
            bias_params = spec.bias.size if spec.bias is not None else 0
            macs = elems * spec.in_ch * spec.kh * spec.kw
        elif node.kind in ("maxpool", "avgpool"):
            element_ops = elems * node.params["k"] * node.params["k"]
        elif node.kind == "resize":
            element_ops = elems * 4  # four taps per bilinear output
        elif node.kind in ("relu", "leaky_relu", "add", "concat"):
            element_ops = elems
        rows.append(LayerRow(name=node.name, kind=node.kind, out_shape=node.out_shape,
                             weight_params=weight_params, bias_params=bias_params,
                             macs=macs, element_ops=element_ops))
    notes = (
        "neighborhood aggregation (patchmaker) is window averaging: counted as "
        "element operations, zero dense MACs",
    )
    return ComplexityReport(rows=tuple(rows), reference_params=reference_params,
                            notes=notes)


def efficiency(report_or_macs, latency_s: float, energy_j: float) -> EfficiencyReport:
    """Derived throughput/efficiency figures from supplied measurements."""
    macs = getattr(report_or_macs, "total_macs", report_or_macs)
    macs = int(macs)
    if latency_s <= 0 or energy_j <= 0:
        raise ContractError(
            f"latency and energy must be positive, got {latency_s}, {energy_j}"
        )
    if macs <= 0:
        raise ContractError(f"MAC count must be positive, got {macs}")
    return EfficiencyReport(
        macs=macs, latency_s=latency_s, energy_j=energy_j,
        fps=1.0 / latency_s,
        gmac_per_s=macs / latency_s / 1e9,
        gmac_per_j=macs / energy_j / 1e9,
    )


def compression_ratio(params: int, reference: int) -> float:
    """reference / params; display rounds to one decimal."""
    if params <= 0:
        raise ContractError(f"parameter count must be positive, got {params}")
    if reference <= 0:
        raise ContractError(f"reference count must be positive, got {reference}")
    return reference / params


def render_text(report: ComplexityReport) -> str:
    lines = [f"{'layer':40s} {'kind':10s} {'out shape':18s} "
             f"{'params':>10s} {'MACs':>14s} {'elem ops':>12s}"]
    lines.append("-" * len(lines[0]))
    for r in report.rows:
        shape = "x".join(str(v) for v in r.out_shape)
        lines.append(f"{r.name:40s} {r.kind:10s} {shape:18s} "
                     f"{r.params:>10d} {r.macs:>14d} {r.element_ops:>12d}")
    lines.append("-" * len(lines[0]))
    subtotals = report.stage_subtotals
    for stage in report.stage_order:
        if stage in subtotals:
            s = subtotals[stage]
            lines.append(f"{stage:40s} {'':10s} {'':18s} "
                         f"{s['params']:>10d} {s['macs']:>14d} {s['element_ops']:>12d}")
    lines.append(f"{'total':40s} {'':10s} {'':18s} "
                 f"{report.total_params:>10d} {report.total_macs:>14d} "
                 f"{report.total_element_ops:>12d}")
    lines.append("")
    lines.append(f"extractor conv weights: {report.backbone_conv_params}")
    lines.append(f"compression vs {report.reference_params} reference params: "
                 f"{report.compression:.1f}x")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def write_csv(report: ComplexityReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "kind", "out_shape", "params", "macs", "element_ops"])
        for r in report.rows:
            writer.writerow([r.name, r.kind, "x".join(map(str, r.out_shape)),
                             r.params, r.macs, r.element_ops])
        writer.writerow(["total", "", "", report.total_params, report.total_macs,
                         report.total_element_ops])
