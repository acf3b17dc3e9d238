import io

import numpy as np
import pytest
import torch

from brainalign.inference import Query
from brainalign.saliency import (
    SaliencyError,
    SmoothGradConfig,
    compute_saliency,
    guided_backprop,
    lineout,
    render_heatmap_png,
    smooth_guided_backprop,
)
from brainalign.vision import Rectifier, VisionConfig, VolumeEncoder
from brainalign.volumes import CanonicalVolume, SequenceType

MICRO = VisionConfig(block_layers=(1, 1, 1, 1), growth=4, init_channels=4,
                     input_shape=(16, 16, 16), embed_dim=8)


def canonical(data, age=50.0):
    return CanonicalVolume(data=data.astype(np.float32), sequence=SequenceType.AX_T2,
                           patient_age_years=age)


def random_volume(seed=0):
    return canonical(np.random.default_rng(seed).standard_normal((16, 16, 16)))


def make_query(seed=1, dim=8, text="there is a mass"):
    return Query(text=text, embedding=np.random.default_rng(seed).standard_normal(dim))


class TestGuidedRuleOracle:
    def test_two_neuron_hand_computed_values(self):
        # y = u * relu(v * relu(w . x)); all arithmetic in exact binary floats
        w = torch.tensor([2.0, -1.0])
        r1, r2 = Rectifier(), Rectifier()
        r1.guided = True
        r2.guided = True

        def net(x, v, u):
            h1 = r1(w @ x)
            h2 = r2(v * h1)
            return u * h2

        # all-positive path: guided equals plain chain rule
        x = torch.tensor([1.0, 0.5], requires_grad=True)
        y = net(x, v=0.5, u=2.0)
        # hand computation: a1 = 2*1 - 1*0.5 = 1.5 > 0; a2 = 0.75 > 0
        # dy/dh2 = 2 > 0 -> pass; dh1 = 2*0.5 = 1 > 0 -> pass; dx = 1 * w
        (grad,) = torch.autograd.grad(y, x)
        assert torch.equal(grad, torch.tensor([2.0, -1.0]))

        # negative inner weight: upstream gradient at rectifier 1 is negative
        x = torch.tensor([1.0, 0.5], requires_grad=True)
        y = net(x, v=-0.5, u=2.0)
        # a2 = -0.75 <= 0: rectifier 2 forward kills the path; dy/dh2 filtered
        (grad,) = torch.autograd.grad(y, x)
        assert torch.equal(grad, torch.tensor([0.0, 0.0]))

        # active forward path but negative upstream gradient at rectifier 1
        x = torch.tensor([1.0, 0.5], requires_grad=True)
        h1 = r1(w @ x)           # 1.5, active
        y = -3.0 * h1            # upstream gradient -3 < 0: guided zeroes it
        (grad,) = torch.autograd.grad(y, x)
        assert torch.equal(grad, torch.tensor([0.0, 0.0]))

        # plain (non-guided) backward for contrast
        r1.guided = False
        x = torch.tensor([1.0, 0.5], requires_grad=True)
        y = -3.0 * r1(w @ x)
        (grad,) = torch.autograd.grad(y, x)
        assert torch.equal(grad, torch.tensor([-6.0, 3.0]))


class TestGuidedBackprop:
    def test_shape_and_nonnegativity(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        sal = guided_backprop(model, random_volume(), make_query())
        assert sal.shape == (16, 16, 16)
        assert (sal >= 0).all()

    def test_non_canonical_rejected(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        bad = canonical(np.zeros((8, 8, 8)))
        with pytest.raises(SaliencyError, match="non-canonical"):
            guided_backprop(model, bad, make_query())

    def test_zero_weight_final_layer_gives_zero_saliency(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        torch.nn.init.zeros_(model.fc.weight)
        with torch.no_grad():
            model.fc.bias.zero_()
            model.fc.bias[0] = 1.0  # embeddings collapse to e1
        q = Query(text="orthogonal", embedding=np.eye(8)[1])  # e2, orthogonal to e1
        sal = guided_backprop(model, random_volume(), q)
        assert np.allclose(sal, 0.0)

    def test_deterministic(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        v, q = random_volume(), make_query()
        assert np.array_equal(guided_backprop(model, v, q), guided_backprop(model, v, q))

    def test_guided_mode_restored_after_call(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        guided_backprop(model, random_volume(), make_query())
        assert not any(m.guided for m in model.modules() if isinstance(m, Rectifier))


class TestSmoothGuidedBackprop:
    def test_zero_noise_equals_plain(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        v, q = random_volume(), make_query()
        plain = guided_backprop(model, v, q)
        smooth = smooth_guided_backprop(model, v, q, SmoothGradConfig(n_samples=5, noise_std=0.0))
        assert np.abs(smooth - plain).max() <= 1e-6

    def test_single_sample_reproducible(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        v, q = random_volume(), make_query()
        cfg = SmoothGradConfig(n_samples=1, noise_std=0.1, seed=7)
        assert np.array_equal(smooth_guided_backprop(model, v, q, cfg),
                              smooth_guided_backprop(model, v, q, cfg))

    def test_paper_config_accepted_and_recorded(self):
        cfg = SmoothGradConfig(n_samples=50, noise_mean=0.0, noise_std=0.1)
        assert (cfg.n_samples, cfg.noise_mean, cfg.noise_std) == (50, 0.0, 0.1)
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        small = SmoothGradConfig(n_samples=2, noise_std=0.1, seed=3)
        result = compute_saliency(model, random_volume(), make_query(), smooth=small)
        assert result.metadata["n_samples"] == 2
        assert result.metadata["noise_std"] == 0.1
        assert result.metadata["smoothgrad"] is True

    def test_config_validation(self):
        with pytest.raises(SaliencyError):
            SmoothGradConfig(n_samples=0)
        with pytest.raises(SaliencyError):
            SmoothGradConfig(noise_std=-0.1)


class TestLineout:
    def test_single_hot_voxel(self):
        vol = np.zeros((10, 10, 12))
        vol[3, 4, 7] = 5.0
        profile, key, heatmap = lineout(vol, axis=2)
        assert key == 7
        assert profile.shape == (12,)
        assert heatmap.shape == (10, 10)
        assert heatmap[3, 4] == 5.0

    def test_all_zero_volume(self):
        profile, key, _ = lineout(np.zeros((4, 4, 4)), axis=2)
        assert key == 0
        assert np.all(profile == 0)

    def test_length_matches_extent_every_axis(self):
        vol = np.random.default_rng(0).random((5, 6, 7))
        for axis, extent in ((0, 5), (1, 6), (2, 7)):
            profile, key, heatmap = lineout(vol, axis=axis)
            assert len(profile) == extent
            assert key == int(np.argmax(profile))

    def test_invalid_axis(self):
        with pytest.raises(SaliencyError):
            lineout(np.zeros((3, 3, 3)), axis=3)

    def test_key_slice_is_argmax_property(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            vol = rng.random((6, 6, 6))
            profile, key, _ = lineout(vol, axis=int(rng.integers(3)))
            assert profile[key] == profile.max()


class TestComputeSaliency:
    def test_bundle_invariants(self):
        torch.manual_seed(0)
        model = VolumeEncoder(MICRO)
        result = compute_saliency(model, random_volume(), make_query())
        assert result.key_slice == int(np.argmax(result.lineout))
        assert len(result.lineout) == 16
        assert result.volume.shape == (16, 16, 16)
        assert (result.lineout >= 0).all()
        assert result.metadata["sequence"] == "ax_t2"


class TestHeatmapRendering:
    def test_png_roundtrip(self):
        from PIL import Image

        rng = np.random.default_rng(1)
        png = render_heatmap_png(rng.random((16, 16)), rng.random((16, 16)))
        image = Image.open(io.BytesIO(png))
        assert image.size == (16, 16)
        assert image.mode == "RGB"

    def test_flat_inputs_safe(self):
        png = render_heatmap_png(np.zeros((8, 8)), np.zeros((8, 8)))
        assert isinstance(png, bytes) and len(png) > 0
