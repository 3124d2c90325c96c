"""Trainable head: discriminator, losses, hand-written backprop, AdamW, loop.

Only the discriminator and the feature adaptor learn; the backbone is frozen.
The objective is the sum of binary cross-entropy and focal loss over the
patch positions of three branches per minibatch: clean embeddings (label 0),
gradient-steered feature perturbations (label 1), and texture-corrupted
images (per-position labels from the corruption mask). Gradients are exact
and finite-difference checkable because batch contents, including the
perturbed embeddings, are fixed data by the time the losses are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .backbone import BackboneWeights, extract_features
from .data import AugmentConfig, IMAGENET_MEAN, IMAGENET_STD, Sample, augment
from .embedding import EmbeddingConfig, apply_adaptor, embed_pre, identity_adaptor
from .errors import ContractError
from .rng import derived_rng, mix64
from .synthesis import AnomalyBatch, GasConfig, PerlinMask, gas_perturb, las_corrupt, perlin
from .tensor_ops import ConvSpec, Tensor4, bilinear_resize


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorWeights:
    """Two 1x1 convolutions with a leaky-relu between them."""

    conv_a: ConvSpec
    conv_b: ConvSpec
    slope: float = 0.2

    @property
    def in_dim(self) -> int:
        return self.conv_a.in_ch

    @property
    def hidden(self) -> int:
        return self.conv_a.out_ch

    @property
    def param_count(self) -> int:
        return self.conv_a.param_count + self.conv_b.param_count

    def as_param_dict(self) -> dict[str, np.ndarray]:
        return {
            "conv_a.weight": self.conv_a.weights.reshape(self.hidden, self.in_dim),
            "conv_a.bias": self.conv_a.bias,
            "conv_b.weight": self.conv_b.weights.reshape(1, self.hidden),
            "conv_b.bias": self.conv_b.bias,
        }

    @classmethod
    def from_param_dict(cls, params: dict[str, np.ndarray], slope: float = 0.2):
        wa = np.asarray(params["conv_a.weight"], dtype=np.float64)
        wb = np.asarray(params["conv_b.weight"], dtype=np.float64)
        hidden, in_dim = wa.shape
        conv_a = ConvSpec(hidden, in_dim, 1, 1, 1, 0,
                          weights=wa.reshape(hidden, in_dim, 1, 1),
                          bias=np.asarray(params["conv_a.bias"], dtype=np.float64))
        conv_b = ConvSpec(1, hidden, 1, 1, 1, 0,
                          weights=wb.reshape(1, hidden, 1, 1),
                          bias=np.asarray(params["conv_b.bias"], dtype=np.float64))
        return cls(conv_a=conv_a, conv_b=conv_b, slope=slope)


def disc_init(in_dim: int, hidden: int = 175, seed: int = 0,
              slope: float = 0.2) -> DiscriminatorWeights:
    """He-initialized weights, zero biases."""
    rng = derived_rng(seed, "disc-init")
    wa = rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(hidden, in_dim))
    wb = rng.normal(0.0, math.sqrt(2.0 / hidden), size=(1, hidden))
    return DiscriminatorWeights.from_param_dict(
        {"conv_a.weight": wa, "conv_a.bias": np.zeros(hidden),
         "conv_b.weight": wb, "conv_b.bias": np.zeros(1)}, slope=slope)


def _grid_to_mat(e: Tensor4) -> np.ndarray:
    """(n,c,g,g) -> (c, n*g*g) column-per-position matrix."""
    return e.values.transpose(1, 0, 2, 3).reshape(e.c, -1)


def _mat_to_grid(mat: np.ndarray, like: Tensor4, channels: int) -> Tensor4:
    arr = mat.reshape(channels, like.n, like.h, like.w).transpose(1, 0, 2, 3)
    return Tensor4._wrap(np.ascontiguousarray(arr))


def _disc_mats(w: DiscriminatorWeights, e_mat: np.ndarray):
    wa = w.conv_a.weights.reshape(w.hidden, w.in_dim)
    wb = w.conv_b.weights.reshape(1, w.hidden)
    a = wa @ e_mat + w.conv_a.bias[:, None]
    h = np.where(a < 0, w.slope * a, a)
    z = wb @ h + w.conv_b.bias[:, None]
    return z, h, a


def disc_forward(w: DiscriminatorWeights, e: Tensor4) -> Tensor4:
    """Patch-level anomaly logits (n, 1, G, G); probability is sigmoid(logit)."""
    if e.c != w.in_dim:
        raise ContractError(
            f"discriminator expects {w.in_dim} channels, embedding has {e.c}"
        )
    z, _, _ = _disc_mats(w, _grid_to_mat(e))
    return _mat_to_grid(z, e, 1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    l_bce: float
    l_focal: float

    @property
    def l_total(self) -> float:
        return self.l_bce + self.l_focal


def _check_loss_inputs(logits: Tensor4, labels: Tensor4) -> tuple[np.ndarray, np.ndarray]:
    if logits.shape != labels.shape:
        raise ContractError(
            f"logits shape {logits.shape} does not match labels {labels.shape}"
        )
    y = labels.values
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("labels must be exactly 0 or 1")
    return logits.values, y


def bce_loss(logits: Tensor4, labels: Tensor4) -> float:
    """Mean binary cross-entropy on logits (numerically stable form)."""
    z, y = _check_loss_inputs(logits, labels)
    return float(np.mean(np.logaddexp(0.0, z) - z * y))


def focal_loss(logits: Tensor4, labels: Tensor4, alpha: float, gamma: float) -> float:
    """Mean focal loss, -alpha_t * (1 - p_t)^gamma * log(p_t)."""
    z, y = _check_loss_inputs(logits, labels)
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"alpha must be in (0,1], got {alpha}")
    if gamma < 0.0:
        raise ContractError(f"gamma must be non-negative, got {gamma}")
    return float(np.mean(_focal_elements(z, y, alpha, gamma)))


def _focal_elements(z: np.ndarray, y: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    sign = 2.0 * y - 1.0
    u = sign * z
    log_pt = -np.logaddexp(0.0, -u)
    one_minus_pt = expit(-u)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return -alpha_t * np.power(one_minus_pt, gamma) * log_pt


def _loss_grad_elements(z: np.ndarray, y: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """d(bce + focal)/dz per element, before the mean reduction."""
    d_bce = expit(z) - y
    sign = 2.0 * y - 1.0
    u = sign * z
    p_t = expit(u)
    one_minus_pt = expit(-u)
    log_pt = -np.logaddexp(0.0, -u)
    d_focal_du = (alpha * y + (1.0 - alpha) * (1.0 - y)) * (
        gamma * p_t * np.power(one_minus_pt, gamma) * log_pt
        - np.power(one_minus_pt, gamma + 1.0)
    )
    return d_bce + sign * d_focal_du


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class StepCache:
    """Forward quantities for one minibatch, kept for the backward pass.

    The pre-adaptor feature grids are retained for the branches whose inputs
    flow through the adaptor; the perturbed-embedding branch enters the
    discriminator as fixed data.
    """

    batch: AnomalyBatch
    pre_normal: Tensor4
    pre_las: Tensor4


def _branches(disc: DiscriminatorWeights, adaptor: np.ndarray | None, cache: StepCache):
    """Forward all three branches; returns per-branch (z, y, cached mats, pre)."""
    out = []
    for pre, fixed, labels in (
        (cache.pre_normal, None, cache.batch.labels_normal),
        (None, cache.batch.gas, cache.batch.labels_gas),
        (cache.pre_las, None, cache.batch.labels_las),
    ):
        if fixed is not None:
            e = fixed
            pre_mat = None
        else:
            e = apply_adaptor(pre, adaptor) if adaptor is not None else pre
            pre_mat = _grid_to_mat(pre)
        if e.c != disc.in_dim:
            raise ContractError(
                f"stale cache: embedding width {e.c} does not match "
                f"discriminator input {disc.in_dim}"
            )
        e_mat = _grid_to_mat(e)
        z, h, a = _disc_mats(disc, e_mat)
        out.append((z, _grid_to_mat(labels), e_mat, h, a, pre_mat))
    return out


def losses_for(disc: DiscriminatorWeights, adaptor: np.ndarray | None,
               cache: StepCache, alpha: float, gamma: float) -> LossReport:
    """Total loss of the three-branch batch (no gradients)."""
    branches = _branches(disc, adaptor, cache)
    z = np.concatenate([b[0].ravel() for b in branches])
    y = np.concatenate([b[1].ravel() for b in branches])
    l_bce = float(np.mean(np.logaddexp(0.0, z) - z * y))
    l_focal = float(np.mean(_focal_elements(z, y, alpha, gamma)))
    return LossReport(l_bce=l_bce, l_focal=l_focal)


def backward(disc: DiscriminatorWeights, adaptor: np.ndarray | None,
             cache: StepCache, alpha: float, gamma: float):
    """Exact gradients of the total loss.

    Returns (disc_grads, adaptor_grad, LossReport); the frozen backbone
    receives no gradient by construction.
    """
    branches = _branches(disc, adaptor, cache)
    total_positions = sum(b[0].size for b in branches)
    wa = disc.conv_a.weights.reshape(disc.hidden, disc.in_dim)
    wb = disc.conv_b.weights.reshape(1, disc.hidden)

    grads = {name: np.zeros_like(p) for name, p in disc.as_param_dict().items()}
    adaptor_grad = np.zeros_like(adaptor) if adaptor is not None else None
    z_all, y_all = [], []

    for z, y, e_mat, h, a, pre_mat in branches:
        z_all.append(z.ravel())
        y_all.append(y.ravel())
        dz = _loss_grad_elements(z, y, alpha, gamma) / total_positions
        grads["conv_b.weight"] += dz @ h.T
        grads["conv_b.bias"] += dz.sum(axis=1)
        dh = wb.T @ dz
        da = dh * np.where(a < 0, disc.slope, 1.0)
        grads["conv_a.weight"] += da @ e_mat.T
        grads["conv_a.bias"] += da.sum(axis=1)
        if adaptor_grad is not None and pre_mat is not None:
            de = wa.T @ da
            adaptor_grad += de @ pre_mat.T

    z = np.concatenate(z_all)
    y = np.concatenate(y_all)
    report = LossReport(
        l_bce=float(np.mean(np.logaddexp(0.0, z) - z * y)),
        l_focal=float(np.mean(_focal_elements(z, y, alpha, gamma))),
    )
    return grads, adaptor_grad, report


def input_gradient(w: DiscriminatorWeights, e: Tensor4, target_labels: Tensor4,
                   alpha: float = 0.25, gamma: float = 2.0) -> Tensor4:
    """Gradient of the anomaly objective (BCE + focal vs targets) w.r.t. e."""
    if e.c != w.in_dim:
        raise ContractError(
            f"embedding width {e.c} does not match discriminator input {w.in_dim}"
        )
    e_mat = _grid_to_mat(e)
    z, h, a = _disc_mats(w, e_mat)
    y = _grid_to_mat(target_labels)
    if y.shape != z.shape:
        raise ContractError(
            f"target labels shape {target_labels.shape} does not match logits"
        )
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("target labels must be exactly 0 or 1")
    dz = _loss_grad_elements(z, y, alpha, gamma) / z.size
    wa = w.conv_a.weights.reshape(w.hidden, w.in_dim)
    wb = w.conv_b.weights.reshape(1, w.hidden)
    da = (wb.T @ dz) * np.where(a < 0, w.slope, 1.0)
    de = wa.T @ da
    return _mat_to_grid(de, e, e.c)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam moments for one parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One update; returns the new parameter dict and mutates the state."""
    state.step += 1
    t = state.step
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) \
            - state.lr * state.weight_decay * p
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr_adaptor: float = 1e-4
    lr_disc: float = 2e-4
    batch_size: int = 8
    max_epochs: int = 200
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.lr_adaptor <= 0 or self.lr_disc <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be non-negative")


@dataclass(frozen=True)
class SynthesisParams:
    """Knobs of the two corruption branches used while training.

    ridge_prob swaps the blob mask for a thin level-set band of the same
    noise field, which imitates scratch-like defects; las_beta is the upper
    bound of the per-sample blend draw.
    """

    gas: GasConfig = GasConfig()
    las_beta: float = 0.5
    perlin_octaves: int = 6
    perlin_threshold: float = 0.68
    las_label_threshold: float = 0.05
    ridge_prob: float = 0.5


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_bce: float
    l_focal: float
    l_total: float
    val_auroc: float


@dataclass
class TrainResult:
    disc: DiscriminatorWeights
    adaptor: np.ndarray | None
    history: list[EpochStats]
    best_epoch: int
    best_auroc: float


def _normalize(x: Tensor4) -> Tensor4:
    mean = np.asarray(IMAGENET_MEAN)[None, :, None, None]
    std = np.asarray(IMAGENET_STD)[None, :, None, None]
    return Tensor4._wrap((x.values - mean) / std)


def _stack(images: list[Tensor4]) -> Tensor4:
    return Tensor4._wrap(np.concatenate([t.values for t in images], axis=0))


def _ridge_mask(pm: PerlinMask, width: float) -> PerlinMask:
    """Thin filaments: the band of the noise field around its median level."""
    g = pm.grid.values[0, 0]
    band = np.abs(g - np.median(g)) < width
    return PerlinMask(grid=pm.grid, binary=Tensor4(band[None, None].astype(np.float64)),
                      seed=pm.seed, octaves=pm.octaves, threshold=pm.threshold)


def mask_to_grid_labels(mask: Tensor4, gh: int, gw: int, threshold: float) -> Tensor4:
    """Binarize a pixel mask at the embedding grid by covered-area fraction."""
    n, _, h, w = mask.shape
    if h % gh == 0 and w % gw == 0:
        frac = mask.values.reshape(n, 1, gh, h // gh, gw, w // gw).mean(axis=(3, 5))
    else:
        frac = bilinear_resize(mask, gh, gw).values
    return Tensor4._wrap((frac >= threshold).astype(np.float64))


def build_anomaly_batch(backbone: BackboneWeights, embed_cfg: EmbeddingConfig,
                        adaptor: np.ndarray | None, disc: DiscriminatorWeights,
                        raw_images: Tensor4, synth: SynthesisParams,
                        texture_provider, seed: int,
                        input_gradient_fn=None) -> StepCache:
    """Assemble the three-branch batch for one step from [0,1] images."""
    def run_embed(img01: Tensor4) -> Tensor4:
        return embed_pre(extract_features(backbone, _normalize(img01)), embed_cfg)

    pre_normal = run_embed(raw_images)
    e_normal = apply_adaptor(pre_normal, adaptor) if adaptor is not None else pre_normal

    grad_fn = input_gradient_fn
    if grad_fn is None:
        ones = Tensor4.full(e_normal.n, 1, e_normal.h, e_normal.w, 1.0)
        grad_fn = lambda e: input_gradient(disc, e, ones)
    # the configured sigma/step/band are relative to the embedding's RMS so the
    # perturbation stays meaningful for any feature scale (random extractors
    # have no canonical magnitude); explicit r_min/r_max stay absolute
    rms = float(np.sqrt(np.mean(e_normal.values ** 2)))
    rms = max(rms, 1e-12)
    gas = synth.gas
    r_min, r_max = gas.r_min, gas.r_max
    if r_min is None and r_max is None:
        scaled_default = GasConfig(sigma=gas.sigma, ascent_steps=gas.ascent_steps,
                                   ascent_lr=gas.ascent_lr)
        r_min, r_max = (r * rms for r in scaled_default.resolve_band(e_normal.c))
    gas_abs = GasConfig(sigma=gas.sigma * rms, ascent_steps=gas.ascent_steps,
                        ascent_lr=gas.ascent_lr * rms, r_min=r_min, r_max=r_max)
    e_gas = gas_perturb(e_normal, gas_abs, grad_fn, seed=mix64(seed, "gas"))

    corrupted = []
    masks = []
    h, w = raw_images.h, raw_images.w
    las_rng = derived_rng(seed, "las-draws")
    for i in range(raw_images.n):
        img_i = Tensor4._wrap(raw_images.values[i:i + 1])
        pm = perlin(h, w, synth.perlin_octaves, mix64(seed, "las-mask", i),
                    synth.perlin_threshold)
        if las_rng.uniform() < synth.ridge_prob:
            pm = _ridge_mask(pm, width=float(las_rng.uniform(0.02, 0.06)))
        tex = texture_provider(mix64(seed, "las-tex", i), h, w)
        # per-sample blend strength in [0, las_beta]: full replacement through
        # half-blend, so the branch covers both gross and subtle corruption
        out, m = las_corrupt(img_i, tex, pm, float(las_rng.uniform(0.0, synth.las_beta)))
        corrupted.append(out)
        masks.append(m)
    las_images = _stack(corrupted)
    las_masks = _stack(masks)
    pre_las = run_embed(las_images)

    gh, gw = e_normal.h, e_normal.w
    labels_las = mask_to_grid_labels(las_masks, gh, gw, synth.las_label_threshold)
    batch = AnomalyBatch(
        normal=e_normal,
        gas=e_gas,
        las_image=las_images,
        las_mask=las_masks,
        labels_normal=Tensor4.zeros(e_normal.n, 1, gh, gw),
        labels_gas=Tensor4.full(e_normal.n, 1, gh, gw, 1.0),
        labels_las=labels_las,
    )
    return StepCache(batch=batch, pre_normal=pre_normal, pre_las=pre_las)


def train(train_samples: list[Sample], cfg: TrainConfig, val_samples: list[Sample],
          *, backbone: BackboneWeights, embed_cfg: EmbeddingConfig,
          hidden: int, input_size: int, synth: SynthesisParams = SynthesisParams(),
          augment_cfg: AugmentConfig | None = None,
          texture_provider=None) -> TrainResult:
    """Train the head; returns the best-validation-AUROC checkpoint.

    Deterministic per (cfg.seed, inputs): shuffling, corruption masks,
    perturbations and augmentation all derive from the one seed.
    """
    from .data import make_texture_provider  # local import, avoids cycle at module load
    from .evaluate import auroc, image_score

    if not train_samples:
        raise ContractError("training set is empty")
    val_labels = sorted({s.label for s in val_samples})
    if val_labels != ["anomalous", "normal"]:
        raise ContractError(
            f"validation set must contain both classes, got labels {val_labels}"
        )
    if texture_provider is None:
        texture_provider = make_texture_provider(mix64(cfg.seed, "textures"))
    if augment_cfg is None:
        augment_cfg = AugmentConfig(seed=mix64(cfg.seed, "augment"))

    grid_dim = backbone.config.channels[1] + backbone.config.channels[2]
    adaptor = identity_adaptor(grid_dim) if embed_cfg.adaptor else None
    disc = disc_init(grid_dim, hidden=hidden, seed=mix64(cfg.seed, "disc"))

    opt_disc = AdamWState(lr=cfg.lr_disc, weight_decay=cfg.weight_decay)
    opt_adaptor = AdamWState(lr=cfg.lr_adaptor, weight_decay=cfg.weight_decay)

    def resized(s: Sample) -> Tensor4:
        return bilinear_resize(s.image, input_size, input_size)

    def val_score(d: DiscriminatorWeights, a: np.ndarray | None) -> float:
        scores, labels = [], []
        for s in val_samples:
            feats = extract_features(backbone, _normalize(resized(s)))
            e = embed_pre(feats, embed_cfg)
            if a is not None:
                e = apply_adaptor(e, a)
            probs = Tensor4._wrap(expit(disc_forward(d, e).values))
            scores.append(image_score(probs, smooth_sigma=0.0, top_k=1))
            labels.append(1 if s.label == "anomalous" else 0)
        return auroc(scores, labels)

    history: list[EpochStats] = []
    best = (float("-inf"), 0, disc, adaptor)
    n = len(train_samples)

    for epoch in range(cfg.max_epochs):
        order = derived_rng(cfg.seed, "shuffle", epoch).permutation(n)
        losses: list[LossReport] = []
        for step_start in range(0, n, cfg.batch_size):
            idx = order[step_start:step_start + cfg.batch_size]
            step_seed = mix64(cfg.seed, "step", epoch, int(step_start))
            imgs = [resized(augment(train_samples[int(i)], augment_cfg,
                                    index=epoch * n + int(i)))
                    for i in idx]
            cache = build_anomaly_batch(backbone, embed_cfg, adaptor, disc,
                                        _stack(imgs), synth, texture_provider,
                                        seed=step_seed)
            disc_grads, adaptor_grad, report = backward(
                disc, adaptor, cache, cfg.focal_alpha, cfg.focal_gamma)
            if not math.isfinite(report.l_total):
                raise ContractError(
                    f"non-finite loss at epoch {epoch} step {step_start // cfg.batch_size}: "
                    f"bce={report.l_bce} focal={report.l_focal}"
                )
            disc = DiscriminatorWeights.from_param_dict(
                adamw_step(opt_disc, disc.as_param_dict(), disc_grads), slope=disc.slope)
            if adaptor is not None:
                adaptor = adamw_step(opt_adaptor, {"adaptor": adaptor},
                                     {"adaptor": adaptor_grad})["adaptor"]
            losses.append(report)

        l_bce = math.fsum(r.l_bce for r in losses) / len(losses)
        l_focal = math.fsum(r.l_focal for r in losses) / len(losses)
        val_auroc = val_score(disc, adaptor)
        history.append(EpochStats(epoch=epoch, l_bce=l_bce, l_focal=l_focal,
                                  l_total=l_bce + l_focal, val_auroc=val_auroc))
        if val_auroc > best[0]:
            best = (val_auroc, epoch, disc,
                    adaptor.copy() if adaptor is not None else None)

    best_auroc, best_epoch, disc, adaptor = best
    if not history:
        best_auroc, best_epoch = 0.0, 0
    return TrainResult(disc=disc, adaptor=adaptor, history=history,
                       best_epoch=best_epoch, best_auroc=best_auroc)
