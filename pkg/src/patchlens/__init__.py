"""patchlens: self-supervised patch-level visual anomaly detection engine.

A self-contained pipeline: truncated ResNet-18 feature extraction, patch
embedding, self-supervised anomaly synthesis, discriminator training, INT8
post-training quantization, AUROC evaluation and analytic complexity
profiling — plus a scikit-learn-style estimator wrapper and a CLI.
"""

from .backbone import (BackboneConfig, BackboneWeights, FeaturePair,
                       backbone_random_init, extract_features, load_weights)
from .complexity import ComplexityReport, EfficiencyReport, compression_ratio, count, efficiency
from .data import AugmentConfig, Sample, augment, load_dataset, preprocess, synth_dataset
from .embedding import EmbeddingConfig, embed, neighborhood_aggregate
from .errors import ContractError, FormatError
from .estimator import PatchAnomalyDetector
from .evaluate import EvalConfig, Metrics, SweepResult, auroc, contamination_sweep, evaluate, image_score, upsample_heatmap
from .model import DetectorModel, load_checkpoint, save_checkpoint
from .quantize import (MemoryReport, QTensor, QuantParams, QuantizedModel, calibrate,
                       dequantize, memory_report, qconv2d, quantize_tensor, quantized_forward)
from .synthesis import AnomalyBatch, GasConfig, PerlinMask, contaminate, gas_perturb, las_corrupt, perlin
from .tensor_ops import ConvSpec, Tensor4, activation, bilinear_resize, concat_channels, conv2d, fold_batchnorm, pool2d
from .training import (AdamWState, DiscriminatorWeights, LossReport, TrainConfig,
                       TrainResult, adamw_step, backward, bce_loss, disc_forward,
                       focal_loss, input_gradient, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
