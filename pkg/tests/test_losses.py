"""Generator objective: components, weighting, gating, gradients, robustness."""

import numpy as np
import pytest
import torch

from virtstain.discriminator import (
    MultiScaleDiscriminator,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    r1_penalty,
)
from virtstain.errors import NumericError
from virtstain.generator import sobel_gradients
from virtstain.losses import (
    LossWeights,
    ToyPerceptualExtractor,
    edge_loss,
    l1_64,
    perceptual_loss,
    total_generator_loss,
)

from synth import central_difference, shifted_texture_pair


def _img(seed, side=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, side, side, generator=g, dtype=dtype) * 2 - 1


class TestPerceptualLoss:
    def test_identical_images_zero(self):
        ext = ToyPerceptualExtractor(0)
        x = _img(0, 64)
        assert perceptual_loss(x, x, ext).item() == pytest.approx(0.0, abs=1e-12)

    def test_scale_weights_combine_one_to_half(self):
        calls = []

        class ConstExtractor:
            def distance(self, a, b):
                calls.append(a.shape[-1])
                return torch.tensor(1.0)

        total = perceptual_loss(_img(0, 64), _img(1, 64), ConstExtractor())
        assert total.item() == pytest.approx(1.0 + 0.5)
        assert calls == [128, 256]

    def test_downsampled_distance_smaller_than_full_res_under_shift(self):
        ext = ToyPerceptualExtractor(seed=1)
        a, b = shifted_texture_pair(k=8)
        d512 = ext.distance(a, b).item()
        p128 = perceptual_loss(a, b, ext, sizes=(128,), size_weights=(1.0,)).item()
        assert p128 < d512

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            perceptual_loss(_img(0, 16), _img(0, 32), ToyPerceptualExtractor(0))


class TestL164:
    def test_identical_images_zero(self):
        x = _img(2, 64)
        assert l1_64(x, x).item() == 0.0

    def test_constant_offset_preserved_by_downsampling(self):
        x = _img(3, 64) * 0.4
        delta = 0.2
        assert l1_64(x, x + delta).item() == pytest.approx(delta, abs=1e-6)

    def test_checkerboard_shift_attenuated_versus_full_res(self):
        # cells finer than the 8-px pooling block: a 4-px shift flips every
        # pixel at full resolution but cancels inside each pooled block
        side, cell, k = 512, 4, 4
        base = torch.zeros(1, 1, side + k, side + k)
        for i in range(0, side + k, cell):
            for j in range(0, side + k, cell):
                if ((i // cell) + (j // cell)) % 2 == 0:
                    base[:, :, i : i + cell, j : j + cell] = 1.0
        base = base.repeat(1, 3, 1, 1)
        a = base[:, :, :side, :side]
        b = base[:, :, k : side + k, :side]
        full = (a - b).abs().mean().item()
        coarse = l1_64(a, b).item()
        assert full == pytest.approx(1.0)
        assert coarse < 0.1 * full


class TestEdgeLoss:
    def test_matching_luminance_zero(self):
        x = _img(4, 32)
        assert edge_loss(x, x, scales=(32, 16)).item() == 0.0

    def test_constant_generated_equals_sum_of_target_gradient_means(self):
        hne = _img(5, 32)
        flat = torch.zeros_like(hne)
        got = edge_loss(flat, hne, scales=(32, 16)).item()
        expected = 0.0
        for s in (32, 16):
            x = hne if s == 32 else torch.nn.functional.adaptive_avg_pool2d(hne, s)
            expected += sobel_gradients(x).abs().mean().item()
        assert got == pytest.approx(expected, abs=1e-9)

    def test_compares_against_the_aligned_input_argument(self):
        # moving the second argument moves the loss: it is the reference
        gen = _img(6, 32)
        near = gen + 0.01 * torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        far = -gen
        assert edge_loss(gen, near, scales=(32,)).item() < edge_loss(gen, far, scales=(32,)).item()


class TestTotalLoss:
    def _unit_components(self):
        return {name: torch.tensor(1.0) for name in ("percept", "l1", "edge", "adv", "fm", "dab")}

    def test_unit_components_after_gate(self):
        bundle = total_generator_loss(self._unit_components(), LossWeights(), step=2000)
        assert bundle.total.item() == pytest.approx(13.7)

    def test_unit_components_before_gate(self):
        bundle = total_generator_loss(self._unit_components(), LossWeights(), step=1999)
        assert bundle.total.item() == pytest.approx(2.7)
        assert bundle.weights["adv"] == 0.0
        assert bundle.weights["fm"] == 0.0

    def test_zeros_in_zero_out(self):
        comps = {k: torch.tensor(0.0) for k in ("percept", "l1", "edge", "adv", "fm", "dab")}
        assert total_generator_loss(comps, LossWeights(), step=5000).total.item() == 0.0

    def test_total_is_exact_weighted_sum(self):
        rng = np.random.default_rng(0)
        comps = {
            k: torch.tensor(float(rng.uniform(0, 2)), dtype=torch.float64)
            for k in ("percept", "l1", "edge", "adv", "fm", "dab")
        }
        bundle = total_generator_loss(comps, LossWeights(), step=3000)
        manual = sum(bundle.weights[k] * comps[k].item() for k in comps)
        assert bundle.total.item() == pytest.approx(manual, abs=1e-12)

    def test_non_finite_component_named(self):
        comps = self._unit_components()
        comps["edge"] = torch.tensor(float("nan"))
        with pytest.raises(NumericError, match="edge"):
            total_generator_loss(comps, LossWeights(), step=0)

    def test_missing_components_recorded_as_zero(self):
        comps = {"percept": torch.tensor(1.0), "l1": torch.tensor(1.0)}
        bundle = total_generator_loss(comps, LossWeights(), step=0)
        assert bundle.total.item() == pytest.approx(2.0)
        rec = bundle.to_record()
        assert rec["adv"] == 0.0 and rec["step"] == 0 and rec["total"] == pytest.approx(2.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(l1=-0.1)


class TestNonnegativity:
    def test_components_nonnegative_on_random_inputs(self):
        ext = ToyPerceptualExtractor(2)
        for seed in range(10):
            a, b = _img(seed, 32), _img(seed + 100, 32)
            assert perceptual_loss(a, b, ext).item() >= 0.0
            assert l1_64(a, b).item() >= 0.0
            assert edge_loss(a, b, scales=(32, 16)).item() >= 0.0
            logits = [torch.randn(1, 1, 4, 4, generator=torch.Generator().manual_seed(seed))]
            assert hinge_d_loss(logits, logits).item() >= 0.0


class TestGradientChecks:
    """Central-difference verification, relative error < 1e-2 on 16x16 toys."""

    def _check(self, fn, x, n_indices=48, h=1e-4, tol=1e-2, seed=0):
        x = x.detach().clone().requires_grad_(True)
        fn(x).backward()
        analytic = x.grad.reshape(-1)
        rng = np.random.default_rng(seed)
        idx = rng.choice(x.numel(), size=min(n_indices, x.numel()), replace=False)
        fd = central_difference(lambda t: fn(t).item(), x, idx, h=h)
        scale = analytic.abs().max().item()
        assert scale > 0
        err = (analytic[idx] - fd).abs().max().item() / scale
        assert err < tol, f"relative gradient error {err}"

    def test_l1_64(self):
        target = _img(11)
        self._check(lambda t: l1_64(t, target, size=8), _img(10))

    def test_edge_loss(self):
        hne = _img(13)
        self._check(lambda t: edge_loss(t, hne, scales=(16, 8)), _img(12))

    def test_perceptual(self):
        ext = ToyPerceptualExtractor(3)
        target = _img(15)
        self._check(
            lambda t: perceptual_loss(t, target, ext, sizes=(8, 16), size_weights=(1.0, 0.5)),
            _img(14),
        )

    def test_hinge_g(self):
        logits = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        self._check(lambda t: hinge_g_loss([t]), logits, n_indices=64)

    def test_hinge_d(self):
        g = torch.Generator().manual_seed(2)
        # keep logits away from the hinge kinks at +-1
        real = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64) * 0.4
        fake = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64) * 0.4
        self._check(lambda t: hinge_d_loss([t], [fake]), real, n_indices=64)
        self._check(lambda t: hinge_d_loss([real], [t]), fake, n_indices=64)

    def test_feature_matching_through_discriminator(self):
        torch.manual_seed(0)
        disc = MultiScaleDiscriminator(channels=(4, 8), scales=1).double()
        real = _img(16)

        def fn(t):
            return feature_matching_loss(disc(t).features, disc(real).features)

        self._check(fn, _img(17))

    def test_r1_with_respect_to_discriminator_parameters(self):
        torch.manual_seed(1)
        disc = MultiScaleDiscriminator(channels=(4,), scales=1).double()
        batch = _img(18)

        params = [p for p in disc.parameters()]
        pen = r1_penalty(disc, batch)
        # logit bias drops out of the input gradient, hence allow_unused
        grads = torch.autograd.grad(pen, params, allow_unused=True)
        analytic = torch.cat(
            [
                (g if g is not None else torch.zeros_like(p)).reshape(-1)
                for g, p in zip(grads, params)
            ]
        )

        flat = torch.cat([p.detach().reshape(-1) for p in params])
        rng = np.random.default_rng(4)
        idx = rng.choice(flat.numel(), size=40, replace=False)

        def eval_at(vec):
            offset = 0
            with torch.no_grad():
                for p in params:
                    n = p.numel()
                    p.copy_(vec[offset : offset + n].reshape(p.shape))
                    offset += n
            return r1_penalty(disc, batch).item()

        h = 1e-4
        fd = np.zeros(len(idx))
        for n, i in enumerate(idx):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += h
            lo[i] -= h
            fd[n] = (eval_at(hi) - eval_at(lo)) / (2 * h)
        eval_at(flat)  # restore

        scale = analytic.abs().max().item()
        err = np.abs(analytic[idx].numpy() - fd).max() / scale
        assert err < 1e-2, f"relative gradient error {err}"


class TestMisalignmentRobustness:
    def test_robust_losses_degrade_slower_than_full_res_l1(self):
        ext = ToyPerceptualExtractor(seed=1)
        shifts = (0, 4, 8, 16)
        percept, coarse_l1, full_l1 = [], [], []
        for k in shifts:
            a, b = shifted_texture_pair(k)
            percept.append(perceptual_loss(a, b, ext, sizes=(128,), size_weights=(1.0,)).item())
            coarse_l1.append(l1_64(a, b).item())
            full_l1.append((a - b).abs().mean().item())

        for series in (percept, coarse_l1, full_l1):
            assert series[0] == pytest.approx(0.0, abs=1e-9)
            assert all(series[i] < series[i + 1] for i in range(3)), series

        # normalized by the largest shift, the robust losses stay strictly
        # below full-resolution L1 at every intermediate shift
        for i in (1, 2):
            assert percept[i] / percept[3] < full_l1[i] / full_l1[3]
            assert coarse_l1[i] / coarse_l1[3] < full_l1[i] / full_l1[3]
