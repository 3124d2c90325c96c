"""Truncated ResNet-18 feature extractor.

Only the stem and the first three stages exist; the forward pass emits the
stage-2 and stage-3 maps directly instead of hooking into a full network.
Batchnorm is folded into the convolutions at load time (the extractor is
frozen, so folding is exact and matches the INT8 deployment path), leaving a
conv+relu-only inference graph with the stride schedule 4/8/16.

Channel plans other than the standard (64, 128, 256) exist purely for
desk-scale experiments; the geometry (kernel sizes, strides, block counts)
is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .rng import derived_rng
from .tensor_ops import ConvSpec, Tensor4, activation, add, conv2d, fold_batchnorm, pool2d
from .tgw import read_tgw

STANDARD_CHANNELS = (64, 128, 256)
STANDARD_CONV_PARAMS = 2_778_304

_REF_NAMES = ("ref.input", "ref.f2", "ref.f3")


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int] = STANDARD_CHANNELS
    bn_eps: float = 1e-5


@dataclass(frozen=True)
class BasicBlock:
    conv1: ConvSpec
    conv2: ConvSpec
    down: ConvSpec | None = None


@dataclass(frozen=True)
class BackboneWeights:
    """Folded (conv+bias only) parameters of the truncated extractor."""

    config: BackboneConfig
    stem: ConvSpec
    stages: tuple[tuple[BasicBlock, ...], ...]

    @property
    def conv_param_count(self) -> int:
        """Weight elements of every convolution, excluding biases/BN."""
        total = self.stem.weights.size
        for stage in self.stages:
            for block in stage:
                total += block.conv1.weights.size + block.conv2.weights.size
                if block.down is not None:
                    total += block.down.weights.size
        return total

    @property
    def bn_param_count(self) -> int:
        """Affine batchnorm parameters (gamma+beta) absorbed into the folds."""
        c1, c2, c3 = self.config.channels
        per_block = lambda c: 2 * (2 * c)
        total = 2 * c1  # stem
        total += 2 * per_block(c1)
        total += 2 * per_block(c2) + 2 * c2  # + downsample BN
        total += 2 * per_block(c3) + 2 * c3
        return total


@dataclass(frozen=True)
class FeaturePair:
    """Stage-2 and stage-3 maps: (n, c2, H/8, W/8) and (n, c3, H/16, W/16)."""

    f2: Tensor4
    f3: Tensor4


def expected_backbone_tensors(config: BackboneConfig = BackboneConfig()) -> dict[str, tuple[int, ...]]:
    """Name -> shape table of the unfolded weight container."""
    c1, c2, c3 = config.channels
    table: dict[str, tuple[int, ...]] = {}

    def bn(prefix: str, ch: int):
        for part in ("gamma", "beta", "mean", "var"):
            table[f"{prefix}.{part}"] = (ch,)

    table["stem.conv.weight"] = (c1, 3, 7, 7)
    bn("stem.bn", c1)
    plans = ((c1, c1, False), (c2, c1, True), (c3, c2, True))
    for si, (ch, prev, downsample) in enumerate(plans, start=1):
        for bi in range(2):
            p = f"stage{si}.block{bi}"
            cin = prev if bi == 0 else ch
            table[f"{p}.conv1.weight"] = (ch, cin, 3, 3)
            bn(f"{p}.bn1", ch)
            table[f"{p}.conv2.weight"] = (ch, ch, 3, 3)
            bn(f"{p}.bn2", ch)
            if downsample and bi == 0:
                table[f"{p}.down.conv.weight"] = (ch, prev, 1, 1)
                bn(f"{p}.down.bn", ch)
    return table


def _fold(tensors: dict[str, np.ndarray], conv_name: str, bn_prefix: str,
          spec_shape: tuple[int, ...], stride: int, padding: int, eps: float) -> ConvSpec:
    out_ch, in_ch, kh, kw = spec_shape
    conv = ConvSpec(out_ch, in_ch, kh, kw, stride, padding,
                    weights=tensors[conv_name].astype(np.float64))
    return fold_batchnorm(conv,
                          gamma=tensors[f"{bn_prefix}.gamma"],
                          beta=tensors[f"{bn_prefix}.beta"],
                          mean=tensors[f"{bn_prefix}.mean"],
                          var=tensors[f"{bn_prefix}.var"],
                          eps=eps)


def weights_from_tensors(tensors: dict[str, np.ndarray],
                         config: BackboneConfig = BackboneConfig()) -> BackboneWeights:
    """Validate an unfolded tensor map against the expected table and fold it."""
    table = expected_backbone_tensors(config)
    missing = sorted(set(table) - set(tensors))
    if missing:
        raise FormatError(f"missing backbone tensors: {', '.join(missing)}")
    extra = sorted(set(tensors) - set(table))
    if extra:
        raise FormatError(f"unexpected tensors in backbone container: {', '.join(extra)}")
    for name, shape in table.items():
        got = tuple(tensors[name].shape)
        if got != shape:
            raise FormatError(f"tensor {name!r} has shape {got}, expected {shape}")

    eps = config.bn_eps
    stem = _fold(tensors, "stem.conv.weight", "stem.bn",
                 table["stem.conv.weight"], stride=2, padding=3, eps=eps)
    stages = []
    for si in range(1, 4):
        blocks = []
        for bi in range(2):
            p = f"stage{si}.block{bi}"
            stride1 = 2 if (si > 1 and bi == 0) else 1
            conv1 = _fold(tensors, f"{p}.conv1.weight", f"{p}.bn1",
                          table[f"{p}.conv1.weight"], stride=stride1, padding=1, eps=eps)
            conv2 = _fold(tensors, f"{p}.conv2.weight", f"{p}.bn2",
                          table[f"{p}.conv2.weight"], stride=1, padding=1, eps=eps)
            down = None
            if f"{p}.down.conv.weight" in table:
                down = _fold(tensors, f"{p}.down.conv.weight", f"{p}.down.bn",
                             table[f"{p}.down.conv.weight"], stride=stride1, padding=0, eps=eps)
            blocks.append(BasicBlock(conv1, conv2, down))
        stages.append(tuple(blocks))
    return BackboneWeights(config=config, stem=stem, stages=tuple(stages))


def load_weights(path, config: BackboneConfig = BackboneConfig()) -> BackboneWeights:
    """Load and fold an unfolded TGW weight container.

    Reference activations (ref.input / ref.f2 / ref.f3) may ride along in the
    same file and are ignored here; use :func:`load_reference` to read them.
    """
    tensors = read_tgw(path)
    weight_tensors = {k: v for k, v in tensors.items() if k not in _REF_NAMES}
    return weights_from_tensors(weight_tensors, config)


def load_reference(path) -> dict[str, Tensor4] | None:
    """Reference activation triple from a TGW container, if present."""
    tensors = read_tgw(path)
    if not any(name in tensors for name in _REF_NAMES):
        return None
    missing = [name for name in _REF_NAMES if name not in tensors]
    if missing:
        raise FormatError(f"incomplete reference activations, missing: {missing}")
    return {name.split(".", 1)[1]: Tensor4(tensors[name].astype(np.float64))
            for name in _REF_NAMES}


def backbone_random_init(seed: int, scale: float = 1.0,
                         config: BackboneConfig = BackboneConfig()) -> BackboneWeights:
    """He-style fan-in scaled random weights with identity batchnorm."""
    rng = derived_rng(seed, "backbone-init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_backbone_tensors(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            std = scale * np.sqrt(2.0 / fan_in)
            tensors[name] = rng.normal(0.0, std, size=shape)
        elif name.endswith(".gamma") or name.endswith(".var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return weights_from_tensors(tensors, config)


def _block_forward(x: Tensor4, block: BasicBlock) -> Tensor4:
    out = activation(conv2d(x, block.conv1), "relu")
    out = conv2d(out, block.conv2)
    shortcut = conv2d(x, block.down) if block.down is not None else x
    return activation(add(out, shortcut), "relu")


def extract_features(w: BackboneWeights, x: Tensor4) -> FeaturePair:
    """Run the truncated extractor; emits the stage-2 and stage-3 maps."""
    if x.c != 3:
        raise ContractError(f"backbone input must have 3 channels, got shape {x.shape}")
    if x.h % 32 or x.w % 32 or x.h == 0 or x.w == 0:
        raise ContractError(
            f"backbone input extents must be positive multiples of 32, got {x.shape}"
        )
    out = activation(conv2d(x, w.stem), "relu")
    out = pool2d(out, "max", k=3, stride=2, padding=1)
    out = _block_forward(_block_forward(out, w.stages[0][0]), w.stages[0][1])
    f2 = _block_forward(_block_forward(out, w.stages[1][0]), w.stages[1][1])
    f3 = _block_forward(_block_forward(f2, w.stages[2][0]), w.stages[2][1])
    return FeaturePair(f2=f2, f3=f3)


def folded_tensors(w: BackboneWeights) -> dict[str, np.ndarray]:
    """Folded conv weights/biases as a flat name map (checkpoint embedding)."""
    out: dict[str, np.ndarray] = {}

    def put(prefix: str, spec: ConvSpec):
        out[f"{prefix}.weight"] = spec.weights
        out[f"{prefix}.bias"] = spec.bias if spec.bias is not None else np.zeros(spec.out_ch)

    put("backbone.stem", w.stem)
    for si, stage in enumerate(w.stages, start=1):
        for bi, block in enumerate(stage):
            p = f"backbone.stage{si}.block{bi}"
            put(f"{p}.conv1", block.conv1)
            put(f"{p}.conv2", block.conv2)
            if block.down is not None:
                put(f"{p}.down", block.down)
    return out


def backbone_from_folded(tensors: dict[str, np.ndarray],
                         config: BackboneConfig = BackboneConfig()) -> BackboneWeights:
    """Rebuild folded weights written by :func:`folded_tensors`."""
    c1, c2, c3 = config.channels

    def get(prefix: str, out_ch: int, in_ch: int, k: int, stride: int, padding: int) -> ConvSpec:
        wkey, bkey = f"{prefix}.weight", f"{prefix}.bias"
        if wkey not in tensors or bkey not in tensors:
            raise FormatError(f"checkpoint is missing backbone tensors under {prefix!r}")
        return ConvSpec(out_ch, in_ch, k, k, stride, padding,
                        weights=tensors[wkey].astype(np.float64),
                        bias=tensors[bkey].astype(np.float64))

    stem = get("backbone.stem", c1, 3, 7, stride=2, padding=3)
    stages = []
    plan = ((c1, c1), (c2, c1), (c3, c2))
    for si, (ch, prev) in enumerate(plan, start=1):
        blocks = []
        for bi in range(2):
            p = f"backbone.stage{si}.block{bi}"
            stride1 = 2 if (si > 1 and bi == 0) else 1
            cin = prev if bi == 0 else ch
            conv1 = get(f"{p}.conv1", ch, cin, 3, stride=stride1, padding=1)
            conv2 = get(f"{p}.conv2", ch, ch, 3, stride=1, padding=1)
            down = None
            if f"{p}.down.weight" in tensors:
                down_spec = tensors[f"{p}.down.weight"]
                down = ConvSpec(ch, prev, 1, 1, stride1, 0,
                                weights=down_spec.astype(np.float64),
                                bias=tensors[f"{p}.down.bias"].astype(np.float64))
            blocks.append(BasicBlock(conv1, conv2, down))
        stages.append(tuple(blocks))
    return BackboneWeights(config=config, stem=stem, stages=tuple(stages))
