import numpy as np
import pytest
import torch

from motcast._validation import ShapeError
from motcast.grid import regular_grid, synthetic_mask
from motcast.data import ContextSignals, DEFAULT_START
from motcast.net import ModulatedEncoder, NetConfig, encode_prior, temporal_encoding
from conftest import TINY_NET, TOY_NET
from netchecks import (attention_row_sum_error, candidate_symmetry, gradient_check, make_net, random_inputs,
                       rerandomize, residual_identity, shape_pipeline)


class TestTemporalEncoding:
    def test_deterministic(self):
        assert torch.equal(temporal_encoding([1, 2], [40, 41]), temporal_encoding([1, 2], [40, 41]))

    def test_phases_separate(self):
        a, b = temporal_encoding([0], [100]), temporal_encoding([2], [100])
        assert (a - b).abs().max().item() > 0.5

    def test_year_wraps(self):
        a, b = temporal_encoding([0], [1]), temporal_encoding([0], [366])
        assert (a - b).abs().max().item() < 0.05

    def test_prior_depends_on_time(self):
        net, _ = make_net(TINY_NET, 5, (8, 16))
        a = net.encode_prior([0], [10])
        b = net.encode_prior([2], [10])
        assert not torch.equal(a.spatial, b.spatial)

    def test_encode_prior_from_signals(self):
        grid = regular_grid(8, 16)
        mask = synthetic_mask(grid, 0)
        net, _ = make_net(TINY_NET, 5, (8, 16))
        ctx = encode_prior(ContextSignals.at(DEFAULT_START, grid, mask), net)
        assert ctx.spatial.shape == (1, 8, 4, 8)
        with pytest.raises(ShapeError):
            encode_prior(ContextSignals.at(DEFAULT_START, regular_grid(4, 8), synthetic_mask(regular_grid(4, 8), 0)), net)


class TestModulatedEncoder:
    def setup_method(self):
        torch.manual_seed(0)
        self.enc = ModulatedEncoder(3, TINY_NET).double()
        with torch.no_grad():
            self.enc.bias.normal_()
        self.x = torch.randn(2, 3, 8, 8, dtype=torch.float64)

    def test_zero_modulation_is_plain_encoder(self):
        plain = self.enc.norm(torch.nn.functional.conv2d(self.x, self.enc.weight, self.enc.bias, stride=2))
        assert torch.equal(self.enc(self.x, torch.zeros(2, 8, dtype=torch.float64)), plain)

    def test_zero_input_is_bias_response(self):
        zero = torch.zeros_like(self.x)
        a = self.enc(zero, torch.randn(2, 8, dtype=torch.float64))
        b = self.enc(zero, torch.randn(2, 8, dtype=torch.float64))
        assert torch.equal(a, b)
        expected = self.enc.norm(self.enc.bias[None, :, None, None].expand(2, -1, 4, 4))
        torch.testing.assert_close(a, expected, rtol=0, atol=1e-12)

    def test_modulation_against_rescaled_weights(self):
        m = torch.randn(2, 8, dtype=torch.float64)
        m2 = m.clone()
        m2[:, 3] *= 2
        for mod in (m, m2):
            for b in range(2):
                w = self.enc.weight * (1 + mod[b])[:, None, None, None]
                oracle = torch.nn.functional.conv2d(self.x[b:b + 1], w, self.enc.bias, stride=2)
                torch.testing.assert_close(self.enc.pre_norm(self.x[b:b + 1], mod[b:b + 1]), oracle,
                                           rtol=1e-12, atol=1e-12)
        state = lambda mod: self.enc.pre_norm(self.x, mod) - self.enc.bias[None, :, None, None]
        ratio = state(m2)[:, 3] / state(m)[:, 3]
        expected = ((1 + 2 * m[:, 3]) / (1 + m[:, 3]))[:, None, None]
        torch.testing.assert_close(ratio, expected.expand_as(ratio), rtol=1e-9, atol=1e-9)


class TestFusion:
    def test_identical_latents_finite(self):
        net, _ = make_net(TINY_NET, 5, (8, 16))
        z = torch.randn(1, 8, 4, 8, dtype=torch.float64)
        out = net.fuse_temporal([z] * 4)
        assert out.shape == (1, 8, 4, 8) and torch.isfinite(out).all()

    def test_order_matters(self):
        net, _ = make_net(TINY_NET, 5, (8, 16))
        rerandomize(net)
        zs = [torch.randn(1, 8, 4, 8, dtype=torch.float64) for _ in range(4)]
        swapped = [zs[3], zs[1], zs[2], zs[0]]
        assert (net.fuse_temporal(zs) - net.fuse_temporal(swapped)).abs().max().item() > 0

    def test_wrong_count(self):
        net, _ = make_net(TINY_NET, 5, (8, 16))
        with pytest.raises(ShapeError):
            net.fuse_temporal([torch.zeros(1, 8, 4, 8, dtype=torch.float64)] * 3)

    def test_two_way_fusion_width(self):
        net, _ = make_net(NetConfig(**{**TINY_NET.to_dict(), "n_inputs": 2}), 5, (8, 16))
        assert net.fuse.in_channels == 2 * 8


class TestProcessor:
    def test_residual_identity(self):
        assert residual_identity(TOY_NET)

    def test_finite_for_large_inputs(self):
        net, _ = make_net(TOY_NET)
        rerandomize(net)
        x, ph, doy = random_inputs(net)
        with torch.no_grad():
            out = net(x.clamp(-10, 10) * 10 / x.abs().max(), ph, doy)
        assert torch.isfinite(out).all()

    def test_attention_rows_sum_to_one(self):
        assert attention_row_sum_error(TOY_NET) < 1e-6

    def test_shift_enabled_on_toy_grid(self):
        net, _ = make_net(TOY_NET)
        assert [b.attn.shift for b in net.blocks] == [0, 2]

    def test_latent_grid_must_tile(self):
        with pytest.raises(ShapeError):
            NetConfig(latent_dim=8, patch=2, window=3).latent_shape((16, 32))


class TestDecoder:
    def test_shapes(self):
        ok, shapes = shape_pipeline(TOY_NET)
        assert ok, shapes

    def test_candidate_symmetry(self):
        assert candidate_symmetry(TOY_NET)

    def test_land_filled(self):
        net, ocean = make_net(TOY_NET)
        rerandomize(net)
        x, ph, doy = random_inputs(net)
        with torch.no_grad():
            out = net(x, ph, doy)
        assert torch.all(out[..., torch.tensor(~ocean)] == 0)


class TestForecastNet:
    def test_bitwise_deterministic(self):
        net, _ = make_net(TOY_NET, dtype=torch.float32)
        x, ph, doy = random_inputs(net)
        with torch.no_grad():
            assert net(x, ph, doy).numpy().tobytes() == net(x, ph, doy).numpy().tobytes()

    def test_same_seed_same_init(self):
        a, _ = make_net(TOY_NET, seed=3)
        b, _ = make_net(TOY_NET, seed=3)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_all_gradients_finite(self):
        net, _ = make_net(TOY_NET, dtype=torch.float32)
        rerandomize(net)
        x, ph, doy = random_inputs(net)
        net(x, ph, doy).pow(2).mean().backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and torch.isfinite(p.grad).all(), name

    def test_gradient_check(self):
        assert gradient_check(TOY_NET) < 1e-3

    def test_bad_input_shape(self):
        net, _ = make_net(TINY_NET, 5, (8, 16))
        with pytest.raises(ShapeError):
            net(torch.zeros(1, 3, 5, 8, 16, dtype=torch.float64), [0], [1])
        with pytest.raises(ShapeError):
            net(torch.zeros(1, 4, 5, 8, 8, dtype=torch.float64), [0], [1])
