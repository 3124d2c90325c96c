"""INT8 path: parameter mapping, round-trips, integer conv, memory accounting."""

import numpy as np
import pytest

import patchlens as pl
from patchlens.backbone import BackboneConfig, backbone_random_init
from patchlens.data import synth_dataset
from patchlens.embedding import EmbeddingConfig, identity_adaptor
from patchlens.errors import ContractError
from patchlens.graph import build_graph, execute_float
from patchlens.model import DetectorModel
from patchlens.quantize import (QConv, QuantParams, QTensor, calibrate, dequantize,
                                load_quantized, memory_report, params_from_range,
                                qconv2d, quantize_tensor, quantize_weights,
                                save_quantized)
from patchlens.tensor_ops import ConvSpec, Tensor4
from patchlens.training import disc_init

rng = np.random.default_rng(55)

TINY = BackboneConfig(channels=(4, 8, 8))


def tiny_model(seed=0, size=64, adaptor=True):
    backbone = backbone_random_init(seed, config=TINY)
    dim = TINY.channels[1] + TINY.channels[2]
    cfg = EmbeddingConfig(adaptor=adaptor)
    return DetectorModel(backbone=backbone, embed_cfg=cfg,
                         adaptor=identity_adaptor(dim) if adaptor else None,
                         disc=disc_init(dim, hidden=8, seed=seed), input_size=size)


class TestParamsFromRange:
    def test_symmetric_unit_range(self):
        p, warns = params_from_range(-1.0, 1.0)
        assert p.scale == pytest.approx(1.0 / 127.0)
        assert p.zero_point == 0
        assert not warns

    def test_affine_zero_to_two(self):
        p, _ = params_from_range(0.0, 2.0)
        assert p.scale == pytest.approx(2.0 / 255.0)
        assert p.zero_point == -128

    def test_constant_zero_floored_with_warning(self):
        p, warns = params_from_range(0.0, 0.0)
        assert p.scale == 1e-8
        assert warns

    def test_zero_always_representable(self):
        for lo, hi in [(0.5, 2.0), (-3.0, -1.0), (-1.0, 4.0)]:
            p, _ = params_from_range(lo, hi)
            q = np.clip(np.rint(0.0 / p.scale) + p.zero_point, -128, 127)
            assert (q - p.zero_point) * p.scale == 0.0


class TestQuantizeRoundtrip:
    def test_zero_maps_to_zero_point(self):
        p, _ = params_from_range(-1.0, 3.0)
        q = quantize_tensor(Tensor4.zeros(1, 1, 2, 2), p)
        assert np.all(q.payload == p.zero_point)
        assert np.all(dequantize(q).values == 0.0)

    def test_roundtrip_error_bound(self):
        for seed in range(5):
            r = np.random.default_rng(seed)
            x = r.uniform(-1.0, 1.0, size=(1, 3, 8, 8))
            p, _ = params_from_range(x.min(), x.max())
            q = quantize_tensor(Tensor4(x), p)
            err = np.abs(dequantize(q).values - x)
            assert err.max() <= p.scale / 2 + 1e-12

    def test_out_of_range_clamps(self):
        p, _ = params_from_range(-1.0, 1.0)
        q = quantize_tensor(Tensor4.full(1, 1, 1, 1, 50.0), p)
        assert q.payload[0, 0, 0, 0] == 127
        q = quantize_tensor(Tensor4.full(1, 1, 1, 1, -50.0), p)
        assert q.payload[0, 0, 0, 0] == -128

    def test_round_half_even(self):
        p = QuantParams(scale=1.0, zero_point=0)
        x = Tensor4(np.array([0.5, 1.5, 2.5, -0.5]).reshape(1, 1, 1, 4))
        assert quantize_tensor(x, p).payload.ravel().tolist() == [0, 2, 2, 0]


class TestQConv2d:
    def test_zero_input_gives_zero_point(self):
        spec = ConvSpec(2, 3, 3, 3, 1, 1, weights=rng.normal(size=(2, 3, 3, 3)))
        qc = quantize_weights(spec)
        in_p, _ = params_from_range(-1.0, 1.0)
        out_p, _ = params_from_range(-2.0, 2.0)
        q = quantize_tensor(Tensor4.zeros(1, 3, 6, 6), in_p)
        out = qconv2d(q, qc, out_p)
        assert np.all(out.payload == out_p.zero_point)

    def test_matches_float_within_half_scale(self):
        r = np.random.default_rng(3)
        x = r.uniform(-1, 1, size=(1, 4, 6, 6))
        spec = ConvSpec(1, 4, 1, 1, 1, 0, weights=r.uniform(-1, 1, size=(1, 4, 1, 1)))
        float_out = pl.conv2d(Tensor4(x), spec).values
        in_p, _ = params_from_range(-1.0, 1.0)
        out_p, _ = params_from_range(float_out.min(), float_out.max())
        qc = quantize_weights(spec)
        q_out = qconv2d(quantize_tensor(Tensor4(x), in_p), qc, out_p)
        err = np.abs(dequantize(q_out).values - float_out)
        # input quantization noise propagates through 4 taps plus requant round
        bound = out_p.scale / 2 + in_p.scale / 2 * np.abs(spec.weights).sum() + 1e-12
        assert err.max() <= bound

    def test_accumulator_worst_case_fits_int32(self):
        # |acc| <= 127 * 255 * k for k kernel taps; largest supported kernel
        k = 7 * 7 * 512
        assert 127 * 255 * k < 2 ** 31

    def test_exact_when_inputs_are_scale_multiples(self):
        # weights and inputs exact multiples of their scales, no clamping:
        # the integer path reproduces float conv exactly
        in_p = QuantParams(scale=0.5, zero_point=0)
        out_p = QuantParams(scale=0.25, zero_point=0)
        x = Tensor4(np.array([[[[1.0, -2.0], [0.5, 3.0]]]]))
        spec = ConvSpec(1, 1, 1, 1, 1, 0, weights=np.array([127 / 127]))
        qc = quantize_weights(spec)
        out = dequantize(qconv2d(quantize_tensor(x, in_p), qc, out_p))
        assert np.array_equal(out.values, x.values)


class TestCalibrateAndForward:
    def test_empty_calibration_rejected(self):
        with pytest.raises(ContractError, match="empty"):
            calibrate(tiny_model(), [])

    def test_deterministic_params(self):
        model = tiny_model()
        imgs = [Tensor4(np.random.default_rng(i).uniform(size=(1, 3, 64, 64)))
                for i in range(3)]
        a = calibrate(model, imgs)
        b = calibrate(model, imgs)
        assert a.sites == b.sites

    def test_forward_shape_and_determinism(self):
        model = tiny_model()
        imgs = [Tensor4(np.random.default_rng(i).uniform(size=(1, 3, 64, 64)))
                for i in range(3)]
        qm = calibrate(model, imgs)
        out1 = qm.heatmaps(imgs[0])
        out2 = qm.heatmaps(imgs[0])
        assert out1.shape == model.heatmaps(imgs[0]).shape
        assert np.array_equal(out1.values, out2.values)

    def test_int8_tracks_float(self):
        # a head with usable logit variation (degenerate near-constant logits
        # make the correlation meaningless, not wrong)
        train, _, test = synth_dataset(21, n_train=8, n_test=6, defect_rate=0.5,
                                       size=128, n_val=1)
        backbone = backbone_random_init(3, config=BackboneConfig(channels=(8, 16, 32)))
        model = DetectorModel(backbone=backbone, embed_cfg=EmbeddingConfig(),
                              adaptor=identity_adaptor(48),
                              disc=disc_init(48, hidden=32, seed=5), input_size=128)
        from patchlens.quantize import default_calibration_set
        qm = calibrate(model, default_calibration_set(train, 128, 8, seed=0))
        f, q = [], []
        for s in test:
            f.append(model.heatmaps(s.image).values.ravel())
            q.append(qm.heatmaps(s.image).values.ravel())
        pearson = np.corrcoef(np.concatenate(f), np.concatenate(q))[0, 1]
        assert pearson >= 0.95

    def test_percentile_validation(self):
        with pytest.raises(ContractError, match="percentile"):
            calibrate(tiny_model(), [Tensor4.zeros(1, 3, 64, 64)], percentile=10.0)


class TestStaticGraph:
    def test_every_shape_enumerated_at_build(self):
        model = tiny_model()
        graph = build_graph(model)
        for node in graph.nodes:
            assert len(node.out_shape) == 4
            assert all(v > 0 for v in node.out_shape)

    def test_graph_float_matches_module_forward(self):
        model = tiny_model()
        x = Tensor4(np.random.default_rng(9).uniform(size=(1, 3, 64, 64)))
        outs = execute_float(build_graph(model), model.normalize(x))
        assert np.array_equal(outs[build_graph(model).output].values,
                              model.heatmaps(x).values)

    def test_input_shape_validated(self):
        model = tiny_model()
        qm = calibrate(model, [Tensor4.zeros(1, 3, 64, 64)])
        with pytest.raises(ContractError, match="input"):
            qm.forward_q(Tensor4.zeros(1, 3, 32, 32))


class TestMemoryReport:
    def test_accounting_identity(self):
        model = tiny_model()
        qm = calibrate(model, [Tensor4.zeros(1, 3, 64, 64)])
        report = memory_report(qm)
        assert report.total_bytes == report.weight_bytes + report.peak_activation_bytes
        assert report.weight_bytes > 0 and report.peak_activation_bytes > 0

    def test_weight_bytes_one_per_param_plus_metadata(self):
        model = tiny_model(adaptor=False)
        qm = calibrate(model, [Tensor4.zeros(1, 3, 64, 64)])
        kernel_elems = sum(qc.weights_q.size for qc in qm.qconvs.values())
        metadata = sum(4 * qc.weight_scales.size + 4 * qc.bias.size
                       for qc in qm.qconvs.values()) + 8 * len(qm.sites)
        assert memory_report(qm).weight_bytes == kernel_elems + metadata

    def test_default_model_within_8mb(self):
        # full-size pipeline at 256x256, the deployment configuration
        backbone = backbone_random_init(0)
        model = DetectorModel(backbone=backbone, embed_cfg=EmbeddingConfig(),
                              adaptor=identity_adaptor(384),
                              disc=disc_init(384, hidden=175, seed=0),
                              input_size=256)
        qm = calibrate(model, [Tensor4(np.random.default_rng(0)
                                       .uniform(size=(1, 3, 256, 256)))])
        report = memory_report(qm)
        assert report.weight_bytes == pytest.approx(2.9e6, rel=0.1)
        assert report.total_bytes <= 8 << 20
        assert report.within_budget


class TestSerialization:
    def test_save_load_identical_outputs(self, tmp_path):
        model = tiny_model(seed=2)
        imgs = [Tensor4(np.random.default_rng(i).uniform(size=(1, 3, 64, 64)))
                for i in range(2)]
        qm = calibrate(model, imgs)
        save_quantized(tmp_path / "q.tgw", qm)
        back = load_quantized(tmp_path / "q.tgw")
        x = imgs[0]

        def norm(q, img):
            mean = np.asarray(q.meta["norm_mean"])[None, :, None, None]
            std = np.asarray(q.meta["norm_std"])[None, :, None, None]
            return Tensor4((img.values - mean) / std)

        # scales round-trip through f32, so payloads may shift one bucket
        a = qm.forward_q(norm(qm, x)).payload
        b = back.forward_q(norm(back, x)).payload
        assert np.max(np.abs(a.astype(int) - b.astype(int))) <= 1
        assert back.sites[back.graph.output].zero_point == \
            qm.sites[qm.graph.output].zero_point

    def test_byte_deterministic(self, tmp_path):
        model = tiny_model(seed=2)
        qm = calibrate(model, [Tensor4.zeros(1, 3, 64, 64)])
        save_quantized(tmp_path / "a.tgw", qm)
        save_quantized(tmp_path / "b.tgw", qm)
        assert (tmp_path / "a.tgw").read_bytes() == (tmp_path / "b.tgw").read_bytes()
