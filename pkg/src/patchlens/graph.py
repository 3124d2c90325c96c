"""Static inference graph over the full pipeline.

Every tensor shape is computed and validated when the graph is built; no
operator's output shape depends on data. The quantizer executes this graph
on INT8 tensors, the profiler walks it for per-layer accounting, and a float
executor exists for calibration (it matches the module-composition forward
bit for bit, which the tests assert).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor_ops import (ConvSpec, Tensor4, activation, add, bilinear_resize,
                         concat_channels, conv2d, conv_output_extent, pool2d)


@dataclass(frozen=True)
class Node:
    name: str
    kind: str                       # input|conv|relu|leaky_relu|maxpool|avgpool|resize|concat|add
    inputs: tuple[str, ...]
    out_shape: tuple[int, int, int, int]
    conv: ConvSpec | None = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    output: str

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ContractError("duplicate node names in graph")

    @property
    def by_name(self) -> dict[str, Node]:
        return {n.name: n for n in self.nodes}

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                out[src].append(n.name)
        return out


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []
        self.shapes: dict[str, tuple[int, int, int, int]] = {}

    def emit(self, name, kind, inputs, out_shape, conv=None, **params) -> str:
        self.nodes.append(Node(name=name, kind=kind, inputs=tuple(inputs),
                               out_shape=tuple(out_shape), conv=conv, params=params))
        self.shapes[name] = tuple(out_shape)
        return name

    def conv(self, name: str, src: str, spec: ConvSpec) -> str:
        n, c, h, w = self.shapes[src]
        if c != spec.in_ch:
            raise ContractError(
                f"graph node {name!r}: input has {c} channels, conv expects {spec.in_ch}"
            )
        oh = conv_output_extent(h, spec.kh, spec.stride, spec.padding)
        ow = conv_output_extent(w, spec.kw, spec.stride, spec.padding)
        return self.emit(name, "conv", [src], (n, spec.out_ch, oh, ow), conv=spec)

    def relu(self, name: str, src: str) -> str:
        return self.emit(name, "relu", [src], self.shapes[src])

    def leaky(self, name: str, src: str, slope: float) -> str:
        return self.emit(name, "leaky_relu", [src], self.shapes[src], slope=slope)

    def maxpool(self, name: str, src: str, k: int, stride: int, padding: int) -> str:
        n, c, h, w = self.shapes[src]
        oh = conv_output_extent(h, k, stride, padding)
        ow = conv_output_extent(w, k, stride, padding)
        return self.emit(name, "maxpool", [src], (n, c, oh, ow),
                         k=k, stride=stride, padding=padding)

    def avgpool(self, name: str, src: str, k: int, stride: int, padding: int) -> str:
        n, c, h, w = self.shapes[src]
        oh = conv_output_extent(h, k, stride, padding)
        ow = conv_output_extent(w, k, stride, padding)
        return self.emit(name, "avgpool", [src], (n, c, oh, ow),
                         k=k, stride=stride, padding=padding)

    def resize(self, name: str, src: str, out_h: int, out_w: int) -> str:
        n, c, _, _ = self.shapes[src]
        return self.emit(name, "resize", [src], (n, c, out_h, out_w),
                         out_h=out_h, out_w=out_w)

    def concat(self, name: str, a: str, b: str) -> str:
        na, ca, ha, wa = self.shapes[a]
        nb, cb, hb, wb = self.shapes[b]
        if (na, ha, wa) != (nb, hb, wb):
            raise ContractError(f"graph concat {name!r}: {self.shapes[a]} vs {self.shapes[b]}")
        return self.emit(name, "concat", [a, b], (na, ca + cb, ha, wa))

    def add(self, name: str, a: str, b: str) -> str:
        if self.shapes[a] != self.shapes[b]:
            raise ContractError(f"graph add {name!r}: {self.shapes[a]} vs {self.shapes[b]}")
        return self.emit(name, "add", [a, b], self.shapes[a])


def build_graph(model, batch: int = 1) -> Graph:
    """Enumerate the full inference pipeline of a DetectorModel."""
    size = model.input_size
    b = _Builder()
    cur = b.emit("input", "input", [], (batch, 3, size, size))

    w = model.backbone
    cur = b.conv("backbone.stem.conv", cur, w.stem)
    cur = b.relu("backbone.stem.relu", cur)
    cur = b.maxpool("backbone.stem.pool", cur, k=3, stride=2, padding=1)

    taps = {}
    for si, stage in enumerate(w.stages, start=1):
        for bi, block in enumerate(stage):
            p = f"backbone.stage{si}.block{bi}"
            skip_src = cur
            out = b.conv(f"{p}.conv1", cur, block.conv1)
            out = b.relu(f"{p}.relu1", out)
            out = b.conv(f"{p}.conv2", out, block.conv2)
            if block.down is not None:
                skip_src = b.conv(f"{p}.down", skip_src, block.down)
            out = b.add(f"{p}.add", out, skip_src)
            cur = b.relu(f"{p}.relu2", out)
        taps[si] = cur

    cfg = model.embed_cfg
    pad = (cfg.patch_size - 1) // 2
    f2, f3 = taps[2], taps[3]
    if cfg.patch_size > 1:
        f2 = b.avgpool("patchmaker.agg2", f2, k=cfg.patch_size, stride=1, padding=pad)
        f3 = b.avgpool("patchmaker.agg3", f3, k=cfg.patch_size, stride=1, padding=pad)
    grid_src = taps[3] if cfg.common_grid == "level3_res" else taps[2]
    _, _, gh, gw = b.shapes[grid_src]
    f2 = b.resize("patchmaker.resize2", f2, gh, gw)
    f3 = b.resize("patchmaker.resize3", f3, gh, gw)
    cur = b.concat("patchmaker.concat", f2, f3)

    if model.adaptor is not None:
        d_out, d_in = model.adaptor.shape
        spec = ConvSpec(d_out, d_in, 1, 1, 1, 0,
                        weights=model.adaptor.reshape(d_out, d_in, 1, 1))
        cur = b.conv("adaptor.conv", cur, spec)

    disc = model.disc
    cur = b.conv("discriminator.conv_a", cur, disc.conv_a)
    cur = b.leaky("discriminator.act", cur, disc.slope)
    cur = b.conv("discriminator.conv_b", cur, disc.conv_b)
    return Graph(nodes=tuple(b.nodes), output=cur)


def execute_float(graph: Graph, x: Tensor4) -> dict[str, Tensor4]:
    """Run the graph in float; returns every node's output (calibration uses this)."""
    values: dict[str, Tensor4] = {}
    for node in graph.nodes:
        if node.kind == "input":
            if x.shape[1:] != node.out_shape[1:]:
                raise ContractError(
                    f"graph input expects {node.out_shape}, got {x.shape}"
                )
            values[node.name] = x
            continue
        args = [values[src] for src in node.inputs]
        if node.kind == "conv":
            out = conv2d(args[0], node.conv)
        elif node.kind == "relu":
            out = activation(args[0], "relu")
        elif node.kind == "leaky_relu":
            out = activation(args[0], "leaky_relu", slope=node.params["slope"])
        elif node.kind == "maxpool":
            out = pool2d(args[0], "max", node.params["k"], node.params["stride"],
                         node.params["padding"])
        elif node.kind == "avgpool":
            out = pool2d(args[0], "avg", node.params["k"], node.params["stride"],
                         node.params["padding"])
        elif node.kind == "resize":
            out = bilinear_resize(args[0], node.params["out_h"], node.params["out_w"])
        elif node.kind == "concat":
            out = concat_channels(args[0], args[1])
        elif node.kind == "add":
            out = add(args[0], args[1])
        else:
            raise ContractError(f"unknown node kind {node.kind!r}")
        values[node.name] = out
    return values


def buffer_liveness(graph: Graph, alias_of: dict[str, str] | None = None):
    """(buffer -> (size_elems, produced_step, last_used_step)) for scheduling.

    alias_of maps nodes whose output shares the producer's buffer (fused ops)
    onto that producer, merging lifetimes.
    """
    alias_of = alias_of or {}

    def root(name: str) -> str:
        while name in alias_of:
            name = alias_of[name]
        return name

    index = {n.name: i for i, n in enumerate(graph.nodes)}
    by_name = graph.by_name
    info: dict[str, list] = {}
    for n in graph.nodes:
        buf = root(n.name)
        elems = int(np.prod(by_name[buf].out_shape))
        if buf not in info:
            info[buf] = [elems, index[buf], index[buf]]
        info[buf][2] = max(info[buf][2], index[n.name])
        for src in n.inputs:
            sbuf = root(src)
            info[sbuf][2] = max(info[sbuf][2], index[n.name])
    # the graph output stays live to the end
    out_buf = root(graph.output)
    info[out_buf][2] = len(graph.nodes) - 1
    return {k: tuple(v) for k, v in info.items()}
