import dataclasses

import numpy as np
import pytest
import torch

from supervessel.errors import ConfigurationError, ShapeError
from supervessel.model import (ModelConfig, SuperVessel, build_model,
                               channel_shuffle, count_parameters,
                               load_checkpoint, save_checkpoint, state_hash,
                               strip_for_test)


def small_config(**overrides):
    base = dict(in_channels=3, n_classes=2, encoder_widths=(8, 16, 32),
                upscale_factor=2, fim_dim=12)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# Independent layer-by-layer parameter arithmetic. Enumerates the documented
# layer inventory from the config alone; never inspects the torch module.
# ---------------------------------------------------------------------------

def conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def double_conv_params(cin, cout):
    return conv_params(3, cin, cout) + conv_params(3, cout, cout)


def encoder_params(cfg):
    w = cfg.encoder_widths
    total = double_conv_params(cfg.in_channels, w[0])
    for cin, cout in zip(w[:-1], w[1:]):
        total += double_conv_params(cin, cout)
    return total


def decoder_params(cfg):
    w = cfg.encoder_widths
    total = 0
    for i in range(len(w) - 1):
        total += conv_params(2, w[i + 1], w[i])          # transposed conv
        total += double_conv_params(2 * w[i], w[i])      # after skip concat
    return total


def ufd_params(cfg):
    return conv_params(1, cfg.encoder_widths[0], cfg.n_classes)


def sr_branch_params(cfg):
    return decoder_params(cfg) + conv_params(1, cfg.encoder_widths[0],
                                             cfg.sr_out_channels)


def fim_params(cfg):
    d = cfg.fim_dim
    group = d // 3
    total = conv_params(1, cfg.n_classes + cfg.sr_out_channels, d)
    total += 3 * conv_params(3, group, group)
    total += 2 * conv_params(1, d, d)
    return total + conv_params(1, d, cfg.n_classes)


def expected_train_params(cfg):
    return (encoder_params(cfg) + decoder_params(cfg) + ufd_params(cfg)
            + sr_branch_params(cfg) + fim_params(cfg))


def expected_test_params(cfg):
    return encoder_params(cfg) + decoder_params(cfg) + ufd_params(cfg)


class TestConfig:

    def test_fim_dim_not_divisible(self):
        with pytest.raises(ConfigurationError, match="fim_dim"):
            ModelConfig(fim_dim=47)

    def test_upscale_not_power_of_two(self):
        with pytest.raises(ConfigurationError, match="upscale_factor"):
            ModelConfig(upscale_factor=3)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError, match="n_classes"):
            ModelConfig(n_classes=1)

    def test_sr_out_defaults_to_in_channels(self):
        assert ModelConfig(in_channels=1).sr_out_channels == 1

    def test_roundtrip_dict(self):
        cfg = small_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterCounts:

    @pytest.mark.parametrize("cfg", [
        small_config(),
        ModelConfig(),  # paper-scale widths
        small_config(in_channels=1, encoder_widths=(4, 8, 16, 32), fim_dim=6),
    ], ids=["small", "default", "deep-small"])
    def test_matches_layer_arithmetic(self, cfg):
        model = build_model(cfg)
        assert count_parameters(model, "train") == expected_train_params(cfg)
        assert count_parameters(model, "test") == expected_test_params(cfg)

    def test_test_strictly_smaller(self):
        model = build_model(small_config())
        assert count_parameters(model, "test") < count_parameters(model, "train")

    def test_difference_is_sr_plus_fim(self):
        cfg = small_config()
        model = build_model(cfg)
        delta = count_parameters(model, "train") - count_parameters(model, "test")
        assert delta == sr_branch_params(cfg) + fim_params(cfg)


class TestForward:

    def test_paper_shapes_200(self):
        # 200x200 input with a 3-stage contracting path (stride 8).
        cfg = ModelConfig(encoder_widths=(4, 8, 16, 32), fim_dim=6)
        model = build_model(cfg)
        out = model.forward_train(torch.rand(1, 3, 200, 200))
        assert tuple(out.o_seg_probs.shape) == (1, 2, 400, 400)
        assert tuple(out.o_sr.shape) == (1, 3, 400, 400)

    def test_paper_shapes_hrf_cropped(self):
        # 876x584 cropped to stride-8 divisible extents.
        cfg = ModelConfig(encoder_widths=(2, 4, 8, 16), fim_dim=6)
        model = build_model(cfg)
        h, w = 584, 872
        out = model.forward_train(torch.rand(1, 3, h, w))
        assert tuple(out.o_seg_probs.shape) == (1, 2, 2 * h, 2 * w)

    def test_upscale_contract_64(self):
        model = build_model(small_config())
        probs = model.forward_test(torch.rand(1, 3, 64, 64))
        assert tuple(probs.shape) == (1, 2, 128, 128)

    @pytest.mark.parametrize("shape", [(1, 3, 16, 16), (2, 3, 32, 16), (1, 3, 48, 32)])
    def test_shape_contract_random_extents(self, shape):
        cfg = small_config()
        model = build_model(cfg)
        out = model.forward_train(torch.rand(*shape))
        n = cfg.upscale_factor
        b, _, h, w = shape
        for t, c in ((out.o_seg_logits, 2), (out.o_seg_probs, 2),
                     (out.o_sr, 3), (out.o_fim, 2)):
            assert tuple(t.shape) == (b, c, n * h, n * w)

    def test_deterministic_repeat(self):
        model = build_model(small_config())
        x = torch.rand(1, 3, 32, 32)
        a = model.forward_train(x)
        b = model.forward_train(x)
        for u, v in ((a.o_seg_probs, b.o_seg_probs), (a.o_sr, b.o_sr),
                     (a.o_fim, b.o_fim)):
            assert torch.equal(u, v)

    def test_forward_test_equals_train_probs(self):
        model = build_model(small_config())
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(model.forward_test(x), model.forward_train(x).o_seg_probs)

    def test_softmax_normalization(self):
        model = build_model(small_config())
        out = model.forward_train(torch.rand(1, 3, 32, 32))
        sums = out.o_seg_probs.sum(dim=1)
        assert (sums - 1).abs().max().item() < 1e-5

    def test_fim_output_open_interval(self):
        model = build_model(small_config())
        out = model.forward_train(torch.rand(1, 3, 32, 32))
        assert out.o_fim.min().item() > 0.0
        assert out.o_fim.max().item() < 1.0

    def test_activations_finite(self):
        model = build_model(small_config())
        out = model.forward_train(torch.rand(2, 3, 32, 32))
        for t in (out.o_seg_logits, out.o_seg_probs, out.o_sr, out.o_fim):
            assert torch.isfinite(t).all()

    def test_wrong_channel_count(self):
        model = build_model(small_config())
        with pytest.raises(ShapeError, match="channels"):
            model.forward_train(torch.rand(1, 1, 32, 32))

    def test_indivisible_extents(self):
        model = build_model(small_config())
        with pytest.raises(ShapeError, match="divisible"):
            model.forward_train(torch.rand(1, 3, 30, 30))


class TestUfd:

    def test_channel_and_size_contract(self):
        cfg = small_config()
        model = build_model(cfg)
        feats = torch.rand(1, cfg.encoder_widths[0], 16, 16)
        out = model.ufd(feats)
        assert tuple(out.shape) == (1, 2, 32, 32)

    def test_constant_plane_stays_constant(self):
        cfg = small_config()
        model = build_model(cfg)
        feats = torch.ones(1, cfg.encoder_widths[0], 8, 8)
        out = model.ufd(feats)
        for c in range(out.shape[1]):
            plane = out[0, c]
            assert torch.allclose(plane, plane.flatten()[0].expand_as(plane),
                                  atol=1e-6)

    def test_bilinear_upsample_against_hand_grid(self):
        # Direct evaluation of the half-pixel bilinear formula for
        # [[0,1],[2,3]] -> 4x4; separable, rows interpolate [0,1] at
        # x in {-.25,.25,.75,1.25} (edge-clamped) and columns [0,2].
        expected = torch.tensor([
            [0.00, 0.25, 0.75, 1.00],
            [0.50, 0.75, 1.25, 1.50],
            [1.50, 1.75, 2.25, 2.50],
            [2.00, 2.25, 2.75, 3.00],
        ])
        x = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])
        got = torch.nn.functional.interpolate(x, scale_factor=2, mode="bilinear",
                                              align_corners=False)
        assert torch.allclose(got[0, 0], expected, atol=1e-6)


class TestChannelShuffle:

    def test_six_channels_three_groups(self):
        x = torch.arange(6.0).reshape(1, 6, 1, 1)
        got = channel_shuffle(x, 3).flatten().tolist()
        assert got == [0.0, 2.0, 4.0, 1.0, 3.0, 5.0]

    def test_matches_index_formula(self):
        c, groups = 12, 3
        x = torch.arange(float(c)).reshape(1, c, 1, 1)
        got = channel_shuffle(x, groups).flatten().tolist()
        expected = [(k % groups) * (c // groups) + k // groups for k in range(c)]
        assert got == [float(e) for e in expected]

    def test_groups_one_identity(self):
        x = torch.rand(2, 6, 3, 3)
        assert torch.equal(channel_shuffle(x, 1), x)

    def test_inverse_recovers_input(self):
        x = torch.rand(1, 12, 4, 4)
        y = channel_shuffle(x, 3)
        assert torch.equal(channel_shuffle(y, 12 // 3), x)

    def test_channel_sums_preserved(self):
        x = torch.rand(1, 6, 5, 5)
        before = sorted(x.sum(dim=(0, 2, 3)).tolist())
        after = sorted(channel_shuffle(x, 3).sum(dim=(0, 2, 3)).tolist())
        assert before == after

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            channel_shuffle(torch.rand(1, 5, 2, 2), 3)


class TestFim:

    def test_output_shape_and_range(self):
        model = build_model(small_config())
        seg = torch.softmax(torch.rand(1, 2, 32, 32), dim=1)
        sr = torch.rand(1, 3, 32, 32)
        out = model.fim(seg, sr)
        assert tuple(out.shape) == (1, 2, 32, 32)
        assert out.min().item() > 0.0 and out.max().item() < 1.0

    def test_zeroed_final_conv_gives_half(self):
        model = build_model(small_config())
        with torch.no_grad():
            model.fim.out.weight.zero_()
            model.fim.out.bias.zero_()
        out = model.fim(torch.rand(1, 2, 16, 16), torch.rand(1, 3, 16, 16))
        assert torch.equal(out, torch.full_like(out, 0.5))

    def test_spatial_mismatch(self):
        model = build_model(small_config())
        with pytest.raises(ShapeError):
            model.fim(torch.rand(1, 2, 16, 16), torch.rand(1, 3, 32, 32))

    @pytest.mark.parametrize("branch,rate", [(0, 1), (1, 2), (2, 4)])
    def test_dilated_impulse_footprint(self, branch, rate):
        # A unit impulse through one dilated conv (zero bias) responds only
        # at offsets {-rate, 0, +rate} in each axis.
        model = build_model(small_config(fim_dim=12))
        conv = model.fim.branches[branch]
        group = model.config.fim_dim // 3
        x = torch.zeros(1, group, 17, 17)
        x[0, 0, 8, 8] = 1.0
        with torch.no_grad():
            response = conv(x).abs().sum(dim=(0, 1))
        nz = response.nonzero()
        offsets = nz - torch.tensor([8, 8])
        footprint = {-rate, 0, rate}
        assert len(nz) > 0
        assert set(offsets[:, 0].tolist()) <= footprint
        assert set(offsets[:, 1].tolist()) <= footprint
        # generic random weights touch the whole footprint
        assert len(nz) == 9


class TestStripAndCheckpoint:

    def test_strip_preserves_test_forward(self):
        model = build_model(small_config())
        x = torch.rand(1, 3, 32, 32)
        before = model.forward_test(x)
        stripped = strip_for_test(model)
        assert torch.equal(stripped.forward_test(x), before)

    def test_strip_removes_branches(self):
        stripped = strip_for_test(build_model(small_config()))
        names = [n for n, _ in stripped.named_parameters()]
        assert not any(n.startswith(("dec_sr.", "fim.")) for n in names)
        assert stripped.phase == "test"

    def test_forward_train_on_stripped_fails(self):
        stripped = strip_for_test(build_model(small_config()))
        with pytest.raises(ConfigurationError, match="stripped"):
            stripped.forward_train(torch.rand(1, 3, 32, 32))

    def test_stripped_serialization_smaller(self, tmp_path):
        model = build_model(small_config())
        full = save_checkpoint(model, tmp_path / "full.ckpt")
        small = save_checkpoint(strip_for_test(model), tmp_path / "small.ckpt")
        assert small.stat().st_size < full.stat().st_size

    def test_checkpoint_roundtrip_bitwise(self, tmp_path):
        model = build_model(small_config())
        x = torch.rand(1, 3, 32, 32)
        before = model.forward_test(x)
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        again = load_checkpoint(path)
        assert torch.equal(again.forward_test(x), before)
        assert state_hash(again.state_dict()) == state_hash(model.state_dict())

    def test_metadata_sidecar(self, tmp_path):
        import json
        model = build_model(small_config())
        save_checkpoint(model, tmp_path / "m.ckpt")
        meta = json.loads((tmp_path / "m.meta.json").read_text())
        assert meta["phase"] == "train"
        assert meta["parameter_count"] == count_parameters(model, "train")
        assert meta["content_hash"] == state_hash(model.state_dict())

    def test_layer_name_prefixes(self):
        model = build_model(small_config())
        names = [n for n, _ in model.named_parameters()]
        prefixes = ("encoder.stage", "dec_seg.stage", "ufd.", "dec_sr.", "fim.")
        assert all(n.startswith(prefixes) for n in names)
        for p in prefixes:
            assert any(n.startswith(p) for n in names)


class TestAblationVariants:

    def test_baseline_has_no_sr_or_fim(self):
        cfg = small_config(with_sr=False, with_ufd=False, with_fim=False)
        model = build_model(cfg)
        names = [n for n, _ in model.named_parameters()]
        assert not any(n.startswith(("dec_sr.", "fim.")) for n in names)
        out = model.forward_train(torch.rand(1, 3, 32, 32))
        assert out.o_sr is None and out.o_fim is None
        sums = out.o_seg_probs.sum(dim=1)
        assert (sums - 1).abs().max().item() < 1e-5

    def test_fim_requires_sr(self):
        with pytest.raises(ConfigurationError):
            small_config(with_sr=False, with_fim=True)

    def test_no_ufd_upsamples_probabilities(self):
        cfg = small_config(with_ufd=False, with_fim=False)
        model = build_model(cfg)
        x = torch.rand(1, 3, 32, 32)
        out = model.forward_train(x)
        assert tuple(out.o_seg_probs.shape) == (1, 2, 64, 64)
        assert torch.equal(model.forward_test(x), out.o_seg_probs)
