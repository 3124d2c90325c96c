"""Command-line front end.

Subcommands: synth-data, train, eval, quantize, profile, sweep,
export-heatmaps. Configuration comes from a plain key=value file plus flag
overrides (flags win); unknown keys are rejected. Every run writes the fully
resolved configuration and a log next to its artifacts, and identical
resolved configs produce byte-identical primary artifacts.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .backbone import BackboneConfig, backbone_random_init, load_weights
from .complexity import count, efficiency, render_text, write_csv
from .data import AugmentConfig, Sample, load_dataset, make_texture_provider, synth_dataset
from .embedding import EmbeddingConfig
from .errors import ContractError
from .evaluate import (EvalConfig, contamination_sweep, evaluate, export_heatmaps,
                       metrics_row, write_metrics_csv)
from .imagefiles import write_png
from .model import DetectorModel, load_checkpoint, save_checkpoint
from .quantize import calibrate, default_calibration_set, load_quantized, memory_report, save_quantized
from .rng import mix64
from .synthesis import GasConfig, las_corrupt, perlin
from .tensor_ops import Tensor4, bilinear_resize
from .training import SynthesisParams, TrainConfig, train


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _parse_channels(text: str) -> tuple[int, int, int]:
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if len(parts) != 3:
        raise UsageError(f"channels needs three integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_rates(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in str(text).replace(",", " ").split() if p)


# option tables: name -> (parser, default, help)
_COMMON = {
    "out_dir": (str, None, "output directory (required)"),
    "config": (str, None, "key=value configuration file"),
    "seed": (int, 0, "root seed; all randomness derives from it"),
    "threads": (int, 1, "worker threads (outputs are identical for any value)"),
    "input_size": (int, 256, "square input edge, multiple of 32"),
}

_DATA = {
    "data": (str, None, "dataset root directory (benchmark layout)"),
    "category": (str, "synthetic", "dataset category name"),
    "val_fraction": (float, 0.3, "validation fraction carved from test"),
    "synth_train": (int, 64, "synthetic: training images"),
    "synth_test": (int, 48, "synthetic: test images"),
    "synth_val": (int, 16, "synthetic: validation images"),
    "synth_defect_rate": (float, 0.5, "synthetic: anomalous fraction in test/val"),
}

_MODEL = {
    "channels": (_parse_channels, (64, 128, 256), "backbone channel plan"),
    "hidden": (int, 175, "discriminator hidden width"),
    "patch_size": (int, 3, "neighborhood aggregation size (odd)"),
    "common_grid": (str, "level3_res", "level3_res | level2_res"),
    "adaptor": (_parse_bool, True, "enable the trainable feature adaptor"),
    "backbone_weights": (str, None, "TGW extractor weights (default: seeded random)"),
    "backbone_scale": (float, 1.0, "random-init scale"),
}

_TRAIN = {
    "epochs": (int, 30, "maximum training epochs"),
    "batch_size": (int, 8, "minibatch size"),
    "lr_disc": (float, 2e-4, "discriminator learning rate"),
    "lr_adaptor": (float, 1e-4, "adaptor learning rate"),
    "weight_decay": (float, 1e-5, "AdamW decoupled weight decay"),
    "focal_alpha": (float, 0.25, "focal loss alpha"),
    "focal_gamma": (float, 2.0, "focal loss gamma"),
    "gas_sigma": (float, 0.015, "feature perturbation sigma"),
    "gas_steps": (int, 1, "gradient ascent steps"),
    "gas_lr": (float, 0.01, "gradient ascent step size"),
    "las_beta": (float, 0.5, "texture blend opacity (1 keeps the image)"),
    "perlin_octaves": (int, 6, "corruption mask octaves"),
    "perlin_threshold": (float, 0.68, "corruption mask threshold"),
    "las_label_threshold": (float, 0.3, "cell coverage needed for an anomalous label"),
    "augment": (_parse_bool, True, "enable training augmentation"),
}

_EVALUATE = {
    "smooth_sigma": (float, 4.0, "Gaussian smoothing sigma (full-resolution pixels)"),
    "top_k": (int, 1, "top-k mean image aggregation (1 = max)"),
}

_SPECS: dict[str, dict] = {
    "synth-data": {**_COMMON, **{k: _DATA[k] for k in
                                 ("category", "synth_train", "synth_test",
                                  "synth_val", "synth_defect_rate")}},
    "train": {**_COMMON, **_DATA, **_MODEL, **_TRAIN, **_EVALUATE},
    "eval": {**_COMMON, **_DATA, **_EVALUATE,
             "checkpoint": (str, None, "checkpoint to evaluate (required)"),
             "quantized": (_parse_bool, False, "evaluate through the INT8 path"),
             "qmodel": (str, None, "quantized model file (else calibrate on the fly)"),
             "calib_count": (int, 16, "calibration images when quantizing on the fly")},
    "quantize": {**_COMMON, **_DATA,
                 "checkpoint": (str, None, "checkpoint to quantize (required)"),
                 "calib_count": (int, 16, "calibration images"),
                 "percentile": (float, None, "range clipping percentile (e.g. 99.9)")},
    "profile": {**_COMMON, **_MODEL,
                "latency_s": (float, None, "measured seconds per inference"),
                "energy_j": (float, None, "measured joules per inference"),
                "reference_params": (int, 24_900_000, "reference parameter count")},
    "sweep": {**_COMMON, **_DATA, **_MODEL, **_TRAIN, **_EVALUATE,
              "rates": (_parse_rates, (0.0, 0.05, 0.10, 0.20, 0.30),
                        "contamination rates"),
              "pool_size": (int, 32, "synthetic defective pool size")},
    "export-heatmaps": {**_COMMON, **_DATA, **_EVALUATE,
                        "checkpoint": (str, None, "checkpoint to run (required)"),
                        "split": (str, "test", "train | val | test")},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchlens",
        description="self-supervised patch-level anomaly detection engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for command, spec in _SPECS.items():
        p = sub.add_parser(command, help=f"{command} pipeline")
        for name, (_, default, help_text) in spec.items():
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                           metavar="V", help=f"{help_text} (default: {default})")
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    spec = _SPECS[command]
    resolved = {name: default for name, (_, default, _h) in spec.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        for lineno, raw in enumerate(Path(config_path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{config_path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in spec:
                raise UsageError(f"{config_path}:{lineno}: unknown key {key!r} "
                                 f"for command {command!r}")
            resolved[key] = spec[key][0](value)
    for name, (parse, _d, _h) in spec.items():
        value = getattr(args, name)
        if value is not None:
            resolved[name] = parse(value)
    resolved["config"] = config_path
    if not resolved.get("out_dir"):
        raise UsageError(f"--out-dir is required for {command!r}")
    return resolved


def _write_resolved(out_dir: Path, command: str, cfg: dict) -> None:
    lines = [f"command={command}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _setup_logging(out_dir: Path) -> logging.Logger:
    logger = logging.getLogger("patchlens")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    fh = logging.FileHandler(out_dir / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    sh = logging.StreamHandler(sys.stdout)
    sh.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(fh)
    logger.addHandler(sh)
    return logger


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _load_samples(cfg: dict):
    """(train, val, test) from a dataset root or the synthetic generator."""
    if cfg.get("data"):
        return load_dataset(cfg["data"], cfg["category"],
                            val_fraction=cfg.get("val_fraction", 0.3), seed=cfg["seed"])
    return synth_dataset(cfg["seed"], cfg["synth_train"], cfg["synth_test"],
                         cfg["synth_defect_rate"], cfg["input_size"],
                         n_val=cfg["synth_val"], category=cfg["category"])


def _ensure_val_has_both_classes(val: list[Sample], cfg: dict) -> list[Sample]:
    labels = {s.label for s in val}
    if labels == {"normal", "anomalous"}:
        return val
    normals = [s for s in val if s.label == "normal"]
    if not normals:
        raise ContractError("validation split has no normal samples")
    textures = make_texture_provider(mix64(cfg["seed"], "val-textures"))
    extra = []
    for i, s in enumerate(normals):
        mask = perlin(s.image.h, s.image.w, cfg.get("perlin_octaves", 6),
                      mix64(cfg["seed"], "val-mask", i),
                      cfg.get("perlin_threshold", 0.68))
        corrupted, mask_map = las_corrupt(s.image, textures(i, s.image.h, s.image.w),
                                          mask, beta=0.5)
        extra.append(Sample(image=corrupted, label="anomalous", mask=mask_map,
                            source=f"synthetic-val:{i}", category=s.category))
    return normals + extra


def _build_model(cfg: dict, train_samples, val_samples, logger) -> tuple[DetectorModel, list]:
    config = BackboneConfig(channels=tuple(cfg["channels"]))
    if cfg.get("backbone_weights"):
        backbone = load_weights(cfg["backbone_weights"], config)
        logger.info("loaded extractor weights from %s", cfg["backbone_weights"])
    else:
        backbone = backbone_random_init(cfg["seed"], scale=cfg["backbone_scale"],
                                        config=config)
        logger.info("random extractor (seed=%d, channels=%s)", cfg["seed"],
                    cfg["channels"])
    embed_cfg = EmbeddingConfig(patch_size=cfg["patch_size"],
                                common_grid=cfg["common_grid"], adaptor=cfg["adaptor"])
    tcfg = TrainConfig(lr_adaptor=cfg["lr_adaptor"], lr_disc=cfg["lr_disc"],
                       batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                       focal_alpha=cfg["focal_alpha"], focal_gamma=cfg["focal_gamma"],
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    synth = SynthesisParams(
        gas=GasConfig(sigma=cfg["gas_sigma"], ascent_steps=cfg["gas_steps"],
                      ascent_lr=cfg["gas_lr"]),
        las_beta=cfg["las_beta"], perlin_octaves=cfg["perlin_octaves"],
        perlin_threshold=cfg["perlin_threshold"],
        las_label_threshold=cfg["las_label_threshold"])
    if cfg["augment"]:
        augment_cfg = AugmentConfig(seed=mix64(cfg["seed"], "augment"))
    else:
        augment_cfg = AugmentConfig(rotation=False, translation=False,
                                    color_jitter=False, hflip=False, vflip=False)
    result = train(train_samples, tcfg, val_samples, backbone=backbone,
                   embed_cfg=embed_cfg, hidden=cfg["hidden"],
                   input_size=cfg["input_size"], synth=synth, augment_cfg=augment_cfg)
    model = DetectorModel(backbone=backbone, embed_cfg=embed_cfg,
                          adaptor=result.adaptor, disc=result.disc,
                          input_size=cfg["input_size"])
    return model, result


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_synth_data(cfg: dict, out_dir: Path, logger) -> int:
    train_s, val_s, test_s = synth_dataset(
        cfg["seed"], cfg["synth_train"], cfg["synth_test"], cfg["synth_defect_rate"],
        cfg["input_size"], n_val=cfg["synth_val"], category=cfg["category"])
    root = out_dir / cfg["category"]
    counters = {"good_train": 0, "good_test": 0, "defect": 0}

    def write(sample: Sample, kind: str):
        img = sample.image.values[0].transpose(1, 2, 0)
        if kind == "train":
            i = counters["good_train"]
            counters["good_train"] += 1
            path = root / "train" / "good" / f"{i:04d}.png"
        elif sample.label == "normal":
            i = counters["good_test"]
            counters["good_test"] += 1
            path = root / "test" / "good" / f"{i:04d}.png"
        else:
            i = counters["defect"]
            counters["defect"] += 1
            path = root / "test" / "defect" / f"{i:04d}.png"
            mask_path = root / "ground_truth" / "defect" / f"{i:04d}_mask.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            write_png(mask_path, sample.mask.values[0, 0])
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(path, img)

    for s in train_s:
        write(s, "train")
    for s in val_s + test_s:
        write(s, "test")
    logger.info("wrote %d train, %d test good, %d defective images under %s",
                counters["good_train"], counters["good_test"], counters["defect"], root)
    return 0


def _cmd_train(cfg: dict, out_dir: Path, logger) -> int:
    train_s, val_s, _ = _load_samples(cfg)
    val_s = _ensure_val_has_both_classes(val_s, cfg)
    model, result = _build_model(cfg, train_s, val_s, logger)
    save_checkpoint(out_dir / "checkpoint.tgw", model, result.best_epoch,
                    result.best_auroc)
    with open(out_dir / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_bce", "l_focal", "l_total", "val_auroc"])
        for row in result.history:
            writer.writerow([row.epoch, f"{row.l_bce:.10g}", f"{row.l_focal:.10g}",
                             f"{row.l_total:.10g}", f"{row.val_auroc:.10g}"])
    logger.info("best epoch %d, validation image AUROC %.4f",
                result.best_epoch, result.best_auroc)
    return 0


def _eval_model(cfg: dict, logger):
    model, epoch, best = load_checkpoint(cfg["checkpoint"])
    logger.info("checkpoint: epoch %d, recorded best AUROC %.4f", epoch, best)
    if not cfg.get("quantized"):
        return model
    if cfg.get("qmodel"):
        return load_quantized(cfg["qmodel"])
    train_s, _, _ = _load_samples({**cfg, "input_size": model.input_size})
    calib = default_calibration_set(train_s, model.input_size, cfg["calib_count"],
                                    seed=cfg["seed"])
    logger.info("calibrating INT8 path on %d images", len(calib))
    return calibrate(model, calib)


def _cmd_eval(cfg: dict, out_dir: Path, logger) -> int:
    if not cfg.get("checkpoint"):
        raise UsageError("--checkpoint is required for eval")
    model = _eval_model(cfg, logger)
    _, _, test_s = _load_samples({**cfg, "input_size": model.input_size})
    ecfg = EvalConfig(smooth_sigma=cfg["smooth_sigma"], top_k=cfg["top_k"],
                      seed=cfg["seed"])
    metrics = evaluate(model, test_s, ecfg)
    write_metrics_csv(out_dir / "metrics.csv",
                      [metrics_row(metrics, run_id="eval", rate=0.0, split="test",
                                   seed=cfg["seed"])])
    logger.info("image AUROC %.4f%s on %d images (%d anomalous)",
                metrics.image_auroc,
                "" if metrics.pixel_auroc is None
                else f", pixel AUROC {metrics.pixel_auroc:.4f}",
                metrics.n_images, metrics.n_anomalous)
    return 0


def _cmd_quantize(cfg: dict, out_dir: Path, logger) -> int:
    if not cfg.get("checkpoint"):
        raise UsageError("--checkpoint is required for quantize")
    model, _, _ = load_checkpoint(cfg["checkpoint"])
    train_s, _, _ = _load_samples({**cfg, "input_size": model.input_size})
    calib = default_calibration_set(train_s, model.input_size, cfg["calib_count"],
                                    seed=cfg["seed"])
    qmodel = calibrate(model, calib, percentile=cfg.get("percentile"))
    for warning in qmodel.warnings:
        logger.warning("calibration: %s", warning)
    save_quantized(out_dir / "quantized.tgw", qmodel)
    report = memory_report(qmodel)
    text = (f"weight_bytes={report.weight_bytes}\n"
            f"peak_activation_bytes={report.peak_activation_bytes}\n"
            f"total_bytes={report.total_bytes}\n"
            f"budget_bytes={report.budget_bytes}\n"
            f"within_budget={str(report.within_budget).lower()}\n")
    (out_dir / "memory_report.txt").write_text(text)
    logger.info("quantized model: %.2f MB total (budget %.0f MB) -> %s",
                report.total_bytes / 2**20, report.budget_bytes / 2**20,
                "PASS" if report.within_budget else "FAIL")
    return 0


def _cmd_profile(cfg: dict, out_dir: Path, logger) -> int:
    config = BackboneConfig(channels=tuple(cfg["channels"]))
    if cfg.get("backbone_weights"):
        backbone = load_weights(cfg["backbone_weights"], config)
    else:
        backbone = backbone_random_init(cfg["seed"], scale=cfg["backbone_scale"],
                                        config=config)
    embed_cfg = EmbeddingConfig(patch_size=cfg["patch_size"],
                                common_grid=cfg["common_grid"], adaptor=cfg["adaptor"])
    from .embedding import identity_adaptor
    from .training import disc_init
    dim = config.channels[1] + config.channels[2]
    model = DetectorModel(
        backbone=backbone, embed_cfg=embed_cfg,
        adaptor=identity_adaptor(dim) if cfg["adaptor"] else None,
        disc=disc_init(dim, hidden=cfg["hidden"], seed=cfg["seed"]),
        input_size=cfg["input_size"])
    report = count(model, reference_params=cfg["reference_params"])
    text = render_text(report)
    if cfg.get("latency_s") and cfg.get("energy_j"):
        eff = efficiency(report, cfg["latency_s"], cfg["energy_j"])
        text += (f"\nlatency: {eff.latency_s} s -> {eff.fps:.3g} FPS, "
                 f"{eff.gmac_per_s:.3g} GMAC/s\n"
                 f"energy: {eff.energy_j} J -> {eff.gmac_per_j:.3g} GMAC/J\n")
    (out_dir / "profile.txt").write_text(text)
    write_csv(report, out_dir / "profile.csv")
    logger.info("total: %d params, %.4g MACs", report.total_params, report.total_macs)
    return 0


def _cmd_sweep(cfg: dict, out_dir: Path, logger) -> int:
    train_s, val_s, test_s = _load_samples(cfg)
    val_s = _ensure_val_has_both_classes(val_s, cfg)
    if cfg.get("data"):
        pool = [s for s in val_s if s.label == "anomalous" and s.mask is not None]
    else:
        _, _, pool = synth_dataset(mix64(cfg["seed"], "pool"), 1, cfg["pool_size"],
                                   1.0, cfg["input_size"], n_val=1,
                                   category=cfg["category"])

    def train_fn(samples, seed):
        model, _ = _build_model({**cfg, "seed": seed}, samples, val_s, logger)
        return model

    ecfg = EvalConfig(smooth_sigma=cfg["smooth_sigma"], top_k=cfg["top_k"],
                      seed=cfg["seed"])
    result = contamination_sweep(train_s, val_s, test_s, pool, cfg["rates"],
                                 cfg["seed"], train_fn,
                                 lambda m, t: evaluate(m, t, ecfg),
                                 csv_path=out_dir / "sweep.csv")
    for rate, metrics in zip(result.rates, result.metrics):
        logger.info("rate %.2f: image AUROC %.4f", rate, metrics.image_auroc)
    return 0


def _cmd_export_heatmaps(cfg: dict, out_dir: Path, logger) -> int:
    if not cfg.get("checkpoint"):
        raise UsageError("--checkpoint is required for export-heatmaps")
    model, _, _ = load_checkpoint(cfg["checkpoint"])
    splits = dict(zip(("train", "val", "test"),
                      _load_samples({**cfg, "input_size": model.input_size})))
    if cfg["split"] not in splits:
        raise UsageError(f"--split must be train, val or test, got {cfg['split']!r}")
    ecfg = EvalConfig(smooth_sigma=cfg["smooth_sigma"], top_k=cfg["top_k"],
                      seed=cfg["seed"])
    written = export_heatmaps(model, splits[cfg["split"]], out_dir / "heatmaps", ecfg)
    logger.info("wrote %d heatmaps under %s", len(written), out_dir / "heatmaps")
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "quantize": _cmd_quantize,
    "profile": _cmd_profile,
    "sweep": _cmd_sweep,
    "export-heatmaps": _cmd_export_heatmaps,
}


def run(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2
    try:
        cfg = _resolve(args.command, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = _setup_logging(out_dir)
    _write_resolved(out_dir, args.command, cfg)
    try:
        return _HANDLERS[args.command](cfg, out_dir, logger)
    except UsageError as exc:
        logger.error("usage error: %s", exc)
        return 2
    except ContractError as exc:
        logger.error("error: %s", exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
