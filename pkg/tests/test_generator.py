"""Generator: Sobel, edge pyramid, dual modulation, forward contracts."""

import numpy as np
import pytest
import torch

from virtstain.errors import ConfigError
from virtstain.generator import (
    GeneratorConfig,
    SpadeFilmBlock,
    build_1024_variant,
    build_generator,
    sobel_gradients,
)

from conftest import tiny_generator_config

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def _sobel_oracle(img: np.ndarray) -> np.ndarray:
    """Explicit replicate-padded 3x3 convolution."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros((2, h, w))
    for i in range(h):
        for j in range(w):
            win = padded[i : i + 3, j : j + 3]
            out[0, i, j] = np.sum(win * SOBEL_X)
            out[1, i, j] = np.sum(win * SOBEL_Y)
    return out


class TestSobel:
    def test_constant_image_zero_gradients(self):
        img = torch.full((3, 8, 8), 0.5)
        assert torch.allclose(sobel_gradients(img), torch.zeros(2, 8, 8), atol=1e-6)

    def test_vertical_step_edge(self):
        img = torch.zeros(8, 8, dtype=torch.float64)
        img[:, 4:] = 1.0
        grad = sobel_gradients(img)
        assert grad[0].abs().sum() > 0  # horizontal response fires
        assert torch.allclose(grad[1], torch.zeros(8, 8, dtype=torch.float64), atol=1e-12)
        assert torch.allclose(grad[0][:, :3], torch.zeros(8, 3, dtype=torch.float64), atol=1e-12)

    def test_hand_image_matches_explicit_convolution(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, size=(5, 5))
        got = sobel_gradients(torch.from_numpy(img)).numpy()
        assert np.allclose(got, _sobel_oracle(img), atol=1e-12)

    def test_rgb_uses_luminance(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(3, 6, 6))
        luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        got = sobel_gradients(torch.from_numpy(img)).numpy()
        assert np.allclose(got, _sobel_oracle(luma), atol=1e-12)

    def test_batched_shape(self):
        out = sobel_gradients(torch.rand(2, 3, 16, 16))
        assert out.shape == (2, 2, 16, 16)


class TestEdgeEncoder:
    def test_canonical_scale_set(self):
        cfg = GeneratorConfig().validate()
        assert set(cfg.edge_scales) == {512, 256, 128, 64, 32}

    def test_pyramid_shapes_and_determinism(self, tiny_generator):
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        maps = tiny_generator.edge_encoder(x)
        assert set(maps) == {16, 32, 64}
        for s, m in maps.items():
            assert m.shape == (2, 4, s, s)
        again = tiny_generator.edge_encoder(x)
        assert all(torch.equal(maps[s], again[s]) for s in maps)

    def test_disabled_edge_encoder_gets_no_gradient(self):
        cfg = tiny_generator_config(use_edge_encoder=False)
        gen = build_generator(cfg, seed=3)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        out = gen(x, None, torch.tensor([0]))
        out.sum().backward()
        for p in gen.edge_encoder.parameters():
            assert p.grad is None or p.grad.abs().sum() == 0
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0 for p in gen.encoder.parameters()
        )


def _conv3x3_replicate(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """(Cin, H, W) x (Cout, Cin, 3, 3) -> (Cout, H, W), replicate padding."""
    cin, h, w = x.shape
    cout = weight.shape[0]
    padded = np.stack([np.pad(x[c], 1, mode="edge") for c in range(cin)])
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(padded[:, i : i + 3, j : j + 3] * weight[o])
    return out


class TestSpadeFilmBlock:
    def _block(self):
        torch.manual_seed(0)
        return SpadeFilmBlock(channels=2, cond_channels=1, embedding_dim=2, hidden=1)

    def test_initialization_identity(self):
        block = self._block()
        h = torch.randn(1, 2, 4, 4)
        u = torch.randn(1, 1, 4, 4)
        e = torch.randn(1, 2)
        out = block(h, u, e)
        assert torch.equal(out, block.norm(h))

    def test_zero_map_leaves_only_channel_modulation(self):
        block = self._block()
        with torch.no_grad():  # simulate an arbitrary training state
            for p in block.parameters():
                p.copy_(torch.randn_like(p))
        h = torch.randn(1, 2, 4, 4)
        e = torch.randn(1, 2)
        out = block(h, torch.zeros(1, 1, 4, 4), e)
        film = block.film(e)
        expected = film[:, :2, None, None] * block.norm(h) + film[:, 2:, None, None]
        assert torch.allclose(out, expected, atol=1e-7)

    def test_hand_arithmetic_oracle(self):
        block = self._block()
        rng = np.random.default_rng(7)
        w_shared = rng.normal(scale=0.3, size=(1, 1, 3, 3))
        w_gamma = rng.normal(scale=0.3, size=(2, 1, 3, 3))
        w_beta = rng.normal(scale=0.3, size=(2, 1, 3, 3))
        w_film = rng.normal(scale=0.3, size=(4, 2))
        b_film = rng.normal(scale=0.3, size=4)
        with torch.no_grad():
            block.shared.weight.copy_(torch.from_numpy(w_shared))
            block.gamma_conv.weight.copy_(torch.from_numpy(w_gamma))
            block.beta_conv.weight.copy_(torch.from_numpy(w_beta))
            block.film.weight.copy_(torch.from_numpy(w_film))
            block.film.bias.copy_(torch.from_numpy(b_film))

        h = rng.normal(size=(1, 2, 2, 2))
        u = rng.normal(size=(1, 1, 2, 2))
        e = rng.normal(size=(1, 2))
        got = block(
            torch.from_numpy(h).float(), torch.from_numpy(u).float(), torch.from_numpy(e).float()
        ).detach().numpy()[0]

        # independent arithmetic: instance norm, zero-padded convs, affine
        normed = np.zeros_like(h[0])
        for c in range(2):
            mu, var = h[0, c].mean(), h[0, c].var()
            normed[c] = (h[0, c] - mu) / np.sqrt(var + 1e-5)

        def conv_pad0(x, weight):
            cin, hh, ww = x.shape
            padded = np.stack([np.pad(x[c], 1) for c in range(cin)])
            out = np.zeros((weight.shape[0], hh, ww))
            for o in range(weight.shape[0]):
                for i in range(hh):
                    for j in range(ww):
                        out[o, i, j] = np.sum(padded[:, i : i + 3, j : j + 3] * weight[o])
            return out

        act = conv_pad0(u[0], w_shared)
        act = np.where(act > 0, act, 0.2 * act)
        gamma_sp = conv_pad0(act, w_gamma)
        beta_sp = conv_pad0(act, w_beta)
        film = w_film @ e[0] + b_film
        expected = (gamma_sp + film[:2, None, None]) * normed + beta_sp + film[2:, None, None]
        assert np.allclose(got, expected, atol=1e-5)

    def test_spatial_mismatch_rejected(self):
        block = self._block()
        with pytest.raises(ValueError):
            block(torch.randn(1, 2, 4, 4), torch.randn(1, 1, 8, 8), torch.randn(1, 2))


def _cond_maps(cfg, batch, seed):
    g = torch.Generator().manual_seed(seed)
    return {
        s: torch.randn(batch, cfg.cond_channels, s, s, generator=g) for s in cfg.cond_scales
    }


class TestGenerate:
    def test_output_shape_and_range(self, tiny_generator, tiny_cfg):
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        out = tiny_generator(x, _cond_maps(tiny_cfg, 2, 0), torch.tensor([0, 1]))
        assert out.shape == (2, 3, 64, 64)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_initialization_invariant_to_conditioning(self, tiny_cfg):
        gen = build_generator(tiny_cfg, seed=3)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        a = gen(x, _cond_maps(tiny_cfg, 1, 1), torch.tensor([0]))
        b = gen(x, _cond_maps(tiny_cfg, 1, 2), torch.tensor([3]))
        c = gen(x, None, torch.tensor([0]), drop_spatial=True, drop_class=True)
        assert torch.equal(a, b)
        assert torch.equal(a, c)

    def _perturbed(self, cfg, seed=3):
        gen = build_generator(cfg, seed=seed)
        with torch.no_grad():  # move off the zero/identity init
            for name, p in gen.named_parameters():
                if "gamma_conv" in name or "beta_conv" in name or "film" in name:
                    p.add_(torch.randn_like(p) * 0.05)
        return gen

    def test_conditioning_matters_after_init(self, tiny_cfg):
        gen = self._perturbed(tiny_cfg)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        a = gen(x, _cond_maps(tiny_cfg, 1, 1), torch.tensor([0]))
        b = gen(x, _cond_maps(tiny_cfg, 1, 2), torch.tensor([0]))
        c = gen(x, _cond_maps(tiny_cfg, 1, 1), torch.tensor([2]))
        assert not torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_drop_spatial_equals_zero_maps(self, tiny_cfg):
        gen = self._perturbed(tiny_cfg)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        zeros = {s: torch.zeros(1, tiny_cfg.cond_channels, s, s) for s in tiny_cfg.cond_scales}
        a = gen(x, _cond_maps(tiny_cfg, 1, 5), torch.tensor([1]), drop_spatial=True)
        b = gen(x, zeros, torch.tensor([1]))
        assert torch.equal(a, b)

    def test_drop_class_equals_null_token(self, tiny_cfg):
        gen = self._perturbed(tiny_cfg)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        cond = _cond_maps(tiny_cfg, 1, 5)
        a = gen(x, cond, torch.tensor([1]), drop_class=True)
        b = gen(x, cond, torch.tensor([tiny_cfg.null_index]))
        assert torch.equal(a, b)

    def test_deterministic_forward(self, tiny_generator, tiny_cfg):
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        cond = _cond_maps(tiny_cfg, 1, 0)
        a = tiny_generator(x, cond, torch.tensor([0]))
        b = tiny_generator(x, cond, torch.tensor([0]))
        assert torch.equal(a, b)

    def test_resolution_mismatch_rejected(self, tiny_generator, tiny_cfg):
        with pytest.raises(ValueError):
            tiny_generator(torch.rand(1, 3, 32, 32), None, torch.tensor([0]))

    def test_wrong_cond_scales_rejected(self, tiny_generator, tiny_cfg):
        bad = {8: torch.zeros(1, tiny_cfg.cond_channels, 8, 8)}
        with pytest.raises(ValueError):
            tiny_generator(torch.rand(1, 3, 64, 64), bad, torch.tensor([0]))

    def test_out_of_range_token_rejected(self, tiny_generator):
        with pytest.raises(ValueError):
            tiny_generator(torch.rand(1, 3, 64, 64), None, torch.tensor([9]))


class TestHighResVariant:
    def test_doubles_resolution_with_extra_level(self, tiny_cfg):
        var = build_1024_variant(tiny_cfg)
        assert var.resolution == 128
        assert var.encoder_channels == (8, 16, 32, 64)
        assert var.bottleneck_side == tiny_cfg.bottleneck_side
        assert var.cond_scales == tiny_cfg.cond_scales
        assert len(var.edge_scales) == len(tiny_cfg.edge_scales) + 1

    def test_forward_at_doubled_resolution(self, tiny_cfg):
        var = build_1024_variant(tiny_cfg)
        gen = build_generator(var, seed=1)
        x = torch.rand(1, 3, 128, 128) * 2 - 1
        cond = _cond_maps(var, 1, 0)
        out = gen(x, cond, torch.tensor([0]))
        assert out.shape == (1, 3, 128, 128)

    def test_config_validation_rejects_bad_cond_scales(self):
        with pytest.raises(ConfigError):
            tiny_generator_config(cond_scales=(64,)).validate()
        with pytest.raises(ConfigError):
            tiny_generator_config(cond_scales=(12,)).validate()
