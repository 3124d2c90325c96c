"""Post-training INT8 quantization of the full inference graph.

Scheme: symmetric per-output-channel weight scales, affine per-tensor
activation parameters from min/max calibration (optionally percentile
clipped). Convolutions accumulate 8-bit products in 32-bit integers (realized
as float64 matmuls over integer values, exact below 2^53) and requantize with
round-half-to-even; relu after a conv is fused into the requantization clamp,
standalone relu and maxpool run directly on the int8 payload. Irregular
element ops (average pooling, bilinear resize, residual add, leaky_relu,
concat requant) dequantize, compute in float and requantize — every tensor
between operators stays INT8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError
from .graph import Graph, build_graph, buffer_liveness, execute_float
from .model import DetectorModel, _GRID_CODES, _GRID_NAMES
from .tensor_ops import ConvSpec, Tensor4, bilinear_resize, pool2d
from .tgw import read_tgw, write_tgw

DEFAULT_BUDGET_BYTES = 8 << 20
_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor affine activation parameters: real = (q - zero_point) * scale."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ContractError(f"scale must be positive and finite, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ContractError(f"zero_point {self.zero_point} outside [-128,127]")


@dataclass(frozen=True)
class QTensor:
    """Signed 8-bit payload plus its quantization parameters."""

    payload: np.ndarray  # int8, NCHW
    params: QuantParams

    @property
    def shape(self):
        return self.payload.shape


@dataclass(frozen=True)
class MemoryReport:
    weight_bytes: int
    peak_activation_bytes: int
    budget_bytes: int = DEFAULT_BUDGET_BYTES

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.peak_activation_bytes

    @property
    def within_budget(self) -> bool:
        return self.total_bytes <= self.budget_bytes


@dataclass(frozen=True)
class QConv:
    """Quantized kernel: int8 weights, per-channel scales, float bias."""

    weights_q: np.ndarray     # int8 (out, in, kh, kw)
    weight_scales: np.ndarray  # float64 (out,)
    bias: np.ndarray          # float64 (out,)
    stride: int
    padding: int


def params_from_range(lo: float, hi: float) -> tuple[QuantParams, list[str]]:
    """Activation parameters covering [lo, hi], always representing 0 exactly.

    Exactly symmetric ranges use the symmetric mapping (scale = hi/127,
    zero_point 0); everything else maps affinely over the 255 buckets.
    Degenerate ranges floor the scale at 1e-8 and report a warning.
    """
    warnings: list[str] = []
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    span = hi - lo
    if span < _SCALE_FLOOR:
        warnings.append(f"constant activation range [{lo}, {hi}]; scale floored")
        return QuantParams(scale=_SCALE_FLOOR, zero_point=0), warnings
    if abs(lo + hi) <= 1e-12 * span:
        return QuantParams(scale=hi / 127.0, zero_point=0), warnings
    scale = span / 255.0
    zp = int(np.clip(-128 - round(lo / scale), -128, 127))
    return QuantParams(scale=scale, zero_point=zp), warnings


def quantize_tensor(x: Tensor4, p: QuantParams) -> QTensor:
    """q = clamp(round_half_even(x / scale) + zero_point, -128, 127)."""
    q = np.rint(x.values / p.scale) + p.zero_point
    return QTensor(payload=np.clip(q, -128, 127).astype(np.int8), params=p)


def dequantize(q: QTensor) -> Tensor4:
    return Tensor4._wrap((q.payload.astype(np.float64) - q.params.zero_point)
                         * q.params.scale)


def quantize_weights(spec: ConvSpec) -> QConv:
    """Symmetric per-output-channel weight quantization (max-abs / 127)."""
    w = spec.weights
    scales = np.maximum(np.abs(w).max(axis=(1, 2, 3)), 0.0) / 127.0
    scales = np.maximum(scales, _SCALE_FLOOR)
    wq = np.clip(np.rint(w / scales[:, None, None, None]), -127, 127).astype(np.int8)
    bias = spec.bias if spec.bias is not None else np.zeros(spec.out_ch)
    return QConv(weights_q=wq, weight_scales=scales, bias=np.asarray(bias, dtype=np.float64),
                 stride=spec.stride, padding=spec.padding)


def qconv2d(q: QTensor, qc: QConv, out_params: QuantParams,
            fused_relu: bool = False) -> QTensor:
    """INT8 convolution with 32-bit accumulation and round-half-even requant.

    Bias is added in the accumulator domain; with fused_relu the output clamp
    floor is the zero point, which realizes relu exactly.
    """
    out_ch, in_ch, kh, kw = qc.weights_q.shape
    n, c, h, w = q.shape
    if c != in_ch:
        raise ContractError(f"qconv2d input has {c} channels, kernel expects {in_ch}")
    p = qc.padding
    # zero in the real domain corresponds to zp in the quantized domain
    padded = np.pad(q.payload.astype(np.float64) - q.params.zero_point,
                    ((0, 0), (0, 0), (p, p), (p, p)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    view = view[:, :, ::qc.stride, ::qc.stride, :, :]
    oh, ow = view.shape[2], view.shape[3]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, -1)
    kernel = qc.weights_q.reshape(out_ch, -1).astype(np.float64).T
    acc = cols @ kernel  # integer-valued float64, exact below 2^53
    bias_q = np.rint(qc.bias / (q.params.scale * qc.weight_scales))
    acc = acc + bias_q
    multiplier = q.params.scale * qc.weight_scales / out_params.scale
    requant = np.rint(acc * multiplier) + out_params.zero_point
    lower = out_params.zero_point if fused_relu else -128
    out = np.clip(requant, lower, 127).astype(np.int8)
    return QTensor(payload=np.ascontiguousarray(out.reshape(n, oh, ow, out_ch)
                                                .transpose(0, 3, 1, 2)),
                   params=out_params)


@dataclass
class QuantizedModel:
    """Calibrated INT8 pipeline; executes the static graph end to end."""

    graph: Graph
    sites: dict[str, QuantParams]
    qconvs: dict[str, QConv]
    input_size: int
    meta: dict
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        consumers = self.graph.consumers()
        by_name = self.graph.by_name
        self.fused_relu: dict[str, str] = {}
        for node in self.graph.nodes:
            if node.kind in ("conv", "add"):
                succ = consumers[node.name]
                if len(succ) == 1 and by_name[succ[0]].kind == "relu":
                    self.fused_relu[node.name] = succ[0]
        self._alias = {relu: op for op, relu in self.fused_relu.items()}

    def out_site(self, name: str) -> QuantParams:
        # a fused conv/add requantizes straight to its relu's calibrated site
        return self.sites[self.fused_relu.get(name, name)]

    def heatmaps(self, image01: Tensor4) -> Tensor4:
        """Dequantized logit heatmap from the end-to-end INT8 path."""
        mean = np.asarray(self.meta["norm_mean"])[None, :, None, None]
        std = np.asarray(self.meta["norm_std"])[None, :, None, None]
        x = Tensor4._wrap((image01.values - mean) / std)
        return dequantize(self.forward_q(x))

    def forward_q(self, x_norm: Tensor4) -> QTensor:
        values: dict[str, QTensor] = {}
        for node in self.graph.nodes:
            name, kind = node.name, node.kind
            if kind == "input":
                if x_norm.shape[1:] != node.out_shape[1:]:
                    raise ContractError(
                        f"quantized graph input expects {node.out_shape}, "
                        f"got {x_norm.shape}"
                    )
                values[name] = quantize_tensor(x_norm, self.out_site(name))
                continue
            args = [values[src] for src in node.inputs]
            if kind == "conv":
                out = qconv2d(args[0], self.qconvs[name], self.out_site(name),
                              fused_relu=name in self.fused_relu)
            elif kind == "relu":
                if name in self._alias:
                    out = args[0]  # fused into the producer's requant clamp
                else:
                    q = args[0]
                    out = QTensor(payload=np.maximum(q.payload, q.params.zero_point),
                                  params=q.params)
            elif kind == "maxpool":
                q = args[0]
                pooled = pool2d(Tensor4._wrap(q.payload.astype(np.float64)), "max",
                                node.params["k"], node.params["stride"],
                                node.params["padding"])
                out = QTensor(payload=pooled.values.astype(np.int8), params=q.params)
            elif kind in ("avgpool", "resize", "leaky_relu", "add", "concat"):
                out = self._float_sim(node, args)
            else:
                raise ContractError(f"unknown node kind {kind!r}")
            values[name] = out
        return values[self.graph.output]

    def _float_sim(self, node, args: list[QTensor]) -> QTensor:
        floats = [dequantize(a) for a in args]
        kind = node.kind
        if kind == "avgpool":
            out = pool2d(floats[0], "avg", node.params["k"], node.params["stride"],
                         node.params["padding"])
        elif kind == "resize":
            out = bilinear_resize(floats[0], node.params["out_h"], node.params["out_w"])
        elif kind == "leaky_relu":
            v = floats[0].values
            out = Tensor4._wrap(np.where(v < 0, node.params["slope"] * v, v))
        elif kind == "concat":
            out = Tensor4._wrap(np.concatenate([f.values for f in floats], axis=1))
        else:  # add (+ fused relu)
            v = floats[0].values + floats[1].values
            if node.name in self.fused_relu:
                v = np.maximum(v, 0.0)
            out = Tensor4._wrap(v)
        return quantize_tensor(out, self.out_site(node.name))


def calibrate(model: DetectorModel, calib_images: list[Tensor4],
              percentile: float | None = None) -> QuantizedModel:
    """Min/max (or percentile-clipped) calibration over float forwards.

    calib_images are [0,1] image tensors at the model's input size; ranges
    are accumulated per graph node, weights quantized per channel.
    """
    if not calib_images:
        raise ContractError("calibration set is empty")
    if percentile is not None and not 50.0 < percentile <= 100.0:
        raise ContractError(f"percentile must be in (50, 100], got {percentile}")
    graph = build_graph(model)
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for img in calib_images:
        outputs = execute_float(graph, model.normalize(img))
        for name, t in outputs.items():
            v = t.values
            if percentile is None:
                vlo, vhi = float(v.min()), float(v.max())
            else:
                vlo = float(np.percentile(v, 100.0 - percentile))
                vhi = float(np.percentile(v, percentile))
            lo[name] = min(lo.get(name, vlo), vlo)
            hi[name] = max(hi.get(name, vhi), vhi)

    sites: dict[str, QuantParams] = {}
    warnings: list[str] = []
    for node in graph.nodes:
        params, warns = params_from_range(lo[node.name], hi[node.name])
        sites[node.name] = params
        warnings.extend(f"{node.name}: {w}" for w in warns)

    qconvs = {node.name: quantize_weights(node.conv)
              for node in graph.nodes if node.kind == "conv"}
    meta = {
        "input_size": model.input_size,
        "channels": model.backbone.config.channels,
        "patch_size": model.embed_cfg.patch_size,
        "common_grid": model.embed_cfg.common_grid,
        "has_adaptor": model.adaptor is not None,
        "hidden": model.disc.hidden,
        "slope": model.disc.slope,
        "norm_mean": _norm_stats()[0],
        "norm_std": _norm_stats()[1],
    }
    return QuantizedModel(graph=graph, sites=sites, qconvs=qconvs,
                          input_size=model.input_size, meta=meta, warnings=warnings)


def _norm_stats():
    from .data import IMAGENET_MEAN, IMAGENET_STD
    return tuple(IMAGENET_MEAN), tuple(IMAGENET_STD)


def default_calibration_set(samples, size: int, count: int, seed: int,
                            corrupt_fraction: float = 0.5) -> list[Tensor4]:
    """Calibration images: resized samples, a fraction texture-corrupted.

    Min/max ranges taken from defect-free images alone clip exactly the
    activations that anomalous inputs produce, so half the set (by default)
    is synthetically corrupted to give the ranges defect headroom.
    """
    from .data import make_texture_provider
    from .rng import mix64
    from .synthesis import las_corrupt, perlin

    if count < 1:
        raise ContractError(f"calibration count must be positive, got {count}")
    textures = make_texture_provider(mix64(seed, "calib-textures"))
    out: list[Tensor4] = []
    for i in range(min(count, len(samples))):
        img = bilinear_resize(samples[i].image, size, size)
        if i % max(1, round(1.0 / max(corrupt_fraction, 1e-9))) == 0 and corrupt_fraction > 0:
            mask = perlin(size, size, octaves=6, seed=mix64(seed, "calib-mask", i),
                          threshold=0.6)
            img, _ = las_corrupt(img, textures(i, size, size), mask, beta=0.25)
        out.append(img)
    return out


def quantized_forward(qmodel: QuantizedModel, image01: Tensor4) -> Tensor4:
    """End-to-end INT8 inference producing the dequantized heatmap."""
    if not isinstance(qmodel, QuantizedModel):
        raise ContractError("model is not calibrated; run calibrate() first")
    return qmodel.heatmaps(image01)


def memory_report(qmodel: QuantizedModel,
                  budget_bytes: int = DEFAULT_BUDGET_BYTES) -> MemoryReport:
    """Static INT8 memory accounting.

    Weights: one byte per kernel element plus per-channel scale (f32) and
    bias (i32) and the 8-byte activation-site records. Peak activations: the
    maximum over the topological schedule of simultaneously live INT8
    tensors, with fused relu outputs sharing their producer's buffer.
    """
    weight_bytes = 0
    for qc in qmodel.qconvs.values():
        weight_bytes += qc.weights_q.size                # int8 payload
        weight_bytes += 4 * qc.weight_scales.size        # f32 scales
        weight_bytes += 4 * qc.bias.size                 # i32 bias words
    weight_bytes += 8 * len(qmodel.sites)                # f32 scale + i32 zero point

    info = buffer_liveness(qmodel.graph, alias_of=qmodel._alias)
    steps = len(qmodel.graph.nodes)
    peak = 0
    for step in range(steps):
        live = sum(size for size, start, end in info.values() if start <= step <= end)
        peak = max(peak, live)
    return MemoryReport(weight_bytes=int(weight_bytes),
                        peak_activation_bytes=int(peak),
                        budget_bytes=budget_bytes)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_quantized(path, qmodel: QuantizedModel) -> None:
    meta = qmodel.meta
    tensors: dict[str, np.ndarray] = {
        "meta.input_size": np.array([meta["input_size"]], dtype=np.uint32),
        "meta.channels": np.array(meta["channels"], dtype=np.uint32),
        "meta.patch_size": np.array([meta["patch_size"]], dtype=np.uint32),
        "meta.common_grid": np.array([_GRID_CODES[meta["common_grid"]]], dtype=np.uint32),
        "meta.has_adaptor": np.array([int(meta["has_adaptor"])], dtype=np.uint32),
        "meta.hidden": np.array([meta["hidden"]], dtype=np.uint32),
        "meta.slope": np.array([meta["slope"]], dtype=np.float32),
    }
    for name, qc in qmodel.qconvs.items():
        tensors[f"{name}.weight_q"] = qc.weights_q
        tensors[f"{name}.wscale"] = qc.weight_scales.astype(np.float32)
        tensors[f"{name}.bias"] = qc.bias.astype(np.float32)
    for name, site in qmodel.sites.items():
        tensors[f"{name}.scale"] = np.array([site.scale], dtype=np.float32)
        tensors[f"{name}.zero_point"] = np.array([site.zero_point], dtype=np.int32)
    write_tgw(path, tensors)


def load_quantized(path) -> QuantizedModel:
    from .backbone import BackboneConfig, backbone_from_folded
    from .embedding import EmbeddingConfig
    from .training import DiscriminatorWeights

    tensors = read_tgw(path)
    try:
        channels = tuple(int(v) for v in tensors["meta.channels"])
        input_size = int(tensors["meta.input_size"][0])
        patch_size = int(tensors["meta.patch_size"][0])
        common_grid = _GRID_NAMES[int(tensors["meta.common_grid"][0])]
        has_adaptor = bool(tensors["meta.has_adaptor"][0])
        hidden = int(tensors["meta.hidden"][0])
        slope = float(tensors["meta.slope"][0])
    except KeyError as exc:
        raise FormatError(f"quantized model {path} is missing {exc}")

    def deq_conv(name: str) -> tuple[np.ndarray, np.ndarray]:
        wq = tensors[f"{name}.weight_q"].astype(np.float64)
        scales = tensors[f"{name}.wscale"].astype(np.float64)
        return wq * scales[:, None, None, None], tensors[f"{name}.bias"].astype(np.float64)

    # rebuild a float skeleton so the same graph-construction path applies
    folded: dict[str, np.ndarray] = {}
    for name in tensors:
        if name.startswith("backbone.") and name.endswith(".weight_q"):
            base = name[: -len(".weight_q")]
            w, b = deq_conv(base)
            key = "backbone.stem" if base == "backbone.stem.conv" else base
            folded[f"{key}.weight"] = w
            folded[f"{key}.bias"] = b
    backbone = backbone_from_folded(folded, BackboneConfig(channels=channels))
    embed_cfg = EmbeddingConfig(patch_size=patch_size, common_grid=common_grid,
                                adaptor=has_adaptor)
    adaptor = None
    if has_adaptor:
        w, _ = deq_conv("adaptor.conv")
        adaptor = w.reshape(w.shape[0], w.shape[1])
    wa, ba = deq_conv("discriminator.conv_a")
    wb, bb = deq_conv("discriminator.conv_b")
    disc = DiscriminatorWeights.from_param_dict(
        {"conv_a.weight": wa.reshape(hidden, -1), "conv_a.bias": ba,
         "conv_b.weight": wb.reshape(1, hidden), "conv_b.bias": bb}, slope=slope)
    skeleton = DetectorModel(backbone=backbone, embed_cfg=embed_cfg,
                             adaptor=adaptor, disc=disc, input_size=input_size)
    graph = build_graph(skeleton)

    sites = {}
    qconvs = {}
    for node in graph.nodes:
        try:
            sites[node.name] = QuantParams(
                scale=float(tensors[f"{node.name}.scale"][0]),
                zero_point=int(tensors[f"{node.name}.zero_point"][0]))
        except KeyError:
            raise FormatError(f"quantized model {path} lacks site {node.name!r}")
        if node.kind == "conv":
            qconvs[node.name] = QConv(
                weights_q=tensors[f"{node.name}.weight_q"],
                weight_scales=tensors[f"{node.name}.wscale"].astype(np.float64),
                bias=tensors[f"{node.name}.bias"].astype(np.float64),
                stride=node.conv.stride, padding=node.conv.padding)
    meta = {
        "input_size": input_size, "channels": channels, "patch_size": patch_size,
        "common_grid": common_grid, "has_adaptor": has_adaptor, "hidden": hidden,
        "slope": slope, "norm_mean": _norm_stats()[0], "norm_std": _norm_stats()[1],
    }
    return QuantizedModel(graph=graph, sites=sites, qconvs=qconvs,
                          input_size=input_size, meta=meta)
