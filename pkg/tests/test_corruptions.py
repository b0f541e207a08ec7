import numpy as np
import pytest

from unoranic.corruptions import (
    BLUR_KINDS,
    DEFAULT_TRAIN_KINDS,
    NOISE_KINDS,
    SEVERITY_PARAMS,
    AugmentationPolicy,
    CorruptionKind,
    CorruptionSpec,
    apply_corruption,
    corrupt_pixels,
    make_variant_set,
    sample_spec,
)
from unoranic.data import ImageSample

ALL_KINDS = list(CorruptionKind)


def ramp_image(side=28):
    """Non-constant test image covering the full [0,1] range."""
    ramp = np.linspace(0, 1, side * side, dtype=np.float32).reshape(side, side)
    return ImageSample(ramp[None], label=4)


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("severity", [1, 3, 5])
def test_output_clipped_shape_label_preserved(kind, severity):
    rng = np.random.default_rng(0)
    img = ImageSample(rng.random((1, 28, 28)).astype(np.float32), label=2)
    out = apply_corruption(img, CorruptionSpec(kind, severity, seed=11))
    assert out.pixels.shape == img.pixels.shape
    assert out.label == 2
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


@pytest.mark.parametrize("kind", [k for k in ALL_KINDS if k is not CorruptionKind.IDENTITY])
def test_every_kind_changes_something(kind):
    img = ramp_image()
    out = apply_corruption(img, CorruptionSpec(kind, 1, seed=5))
    assert not np.array_equal(out.pixels, img.pixels)


def test_identity_is_noop():
    img = ramp_image()
    for severity in (1, 5):
        out = apply_corruption(img, CorruptionSpec(CorruptionKind.IDENTITY, severity, 3))
        np.testing.assert_array_equal(out.pixels, img.pixels)


def test_solarize_definition():
    # severity 5 pins the threshold at 0.5
    assert SEVERITY_PARAMS[CorruptionKind.SOLARIZE][4] == 0.5
    img = ImageSample(np.array([[[0.8, 0.3]]], np.float32))
    out = apply_corruption(img, CorruptionSpec(CorruptionKind.SOLARIZE, 5, 0))
    np.testing.assert_allclose(out.pixels, [[[0.2, 0.3]]], atol=1e-6)


def test_noise_determinism_and_seed_sensitivity():
    img = ramp_image()
    spec = CorruptionSpec(CorruptionKind.GAUSSIAN_NOISE, 3, seed=99)
    a = apply_corruption(img, spec)
    b = apply_corruption(img, spec)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    c = apply_corruption(img, CorruptionSpec(CorruptionKind.GAUSSIAN_NOISE, 3, seed=100))
    assert not np.array_equal(a.pixels, c.pixels)


def test_gaussian_noise_severity_ordering():
    img = ImageSample(np.full((1, 28, 28), 0.5, np.float32))
    def mean_dev(severity):
        out = apply_corruption(img, CorruptionSpec(CorruptionKind.GAUSSIAN_NOISE, severity, 7))
        return np.abs(out.pixels - img.pixels).mean()
    assert mean_dev(5) > mean_dev(1)


@pytest.mark.parametrize("kind", NOISE_KINDS)
def test_noise_severity_monotone_in_expectation(kind):
    img = ImageSample(np.full((1, 28, 28), 0.5, np.float32))
    means = []
    for severity in range(1, 6):
        devs = [
            np.abs(
                apply_corruption(img, CorruptionSpec(kind, severity, seed)).pixels
                - img.pixels
            ).mean()
            for seed in range(100)
        ]
        means.append(np.mean(devs))
    assert all(b >= a for a, b in zip(means, means[1:])), means


def test_severity_and_kind_validation():
    img = ramp_image()
    with pytest.raises(ValueError):
        CorruptionSpec(CorruptionKind.GAMMA, 0, 0)
    with pytest.raises(ValueError):
        CorruptionSpec(CorruptionKind.GAMMA, 6, 0)
    with pytest.raises(ValueError):
        apply_corruption(img, CorruptionSpec("no_such_kind", 3, 0))


@pytest.mark.parametrize("kind", [k for k in DEFAULT_TRAIN_KINDS if k not in BLUR_KINDS])
def test_pixel_alignment_coordinate_impulse(kind):
    # a bright impulse at the corner must stay the brightest pixel: nothing
    # in the training policy may translate or warp coordinates
    img = np.zeros((1, 12, 12), np.float32)
    img[0, 0, 0] = 1.0
    out = corrupt_pixels(img, CorruptionSpec(kind, 1, seed=8))
    assert out[0].argmax() == 0


def test_sample_spec_determinism_and_restriction():
    policy = AugmentationPolicy(kinds=(CorruptionKind.SOLARIZE,))
    a = sample_spec(policy, 123)
    b = sample_spec(policy, 123)
    assert a == b
    for seed in range(50):
        assert sample_spec(policy, seed).kind is CorruptionKind.SOLARIZE


def test_sample_spec_kind_frequencies():
    kinds = (
        CorruptionKind.GAUSSIAN_NOISE,
        CorruptionKind.SOLARIZE,
        CorruptionKind.GAMMA,
    )
    policy = AugmentationPolicy(kinds=kinds)
    draws = [sample_spec(policy, seed).kind for seed in range(10_000)]
    # 3-sigma binomial band around 1/3 for n=10,000 is about +/- 0.014;
    # the spec band [0.28, 0.39] is far looser
    for kind in kinds:
        freq = sum(d is kind for d in draws) / len(draws)
        assert 0.28 <= freq <= 0.39, (kind, freq)


def test_empty_policy_rejected():
    with pytest.raises(ValueError):
        AugmentationPolicy(kinds=())


def test_variant_set_counts_and_determinism():
    img = ramp_image()
    policy = AugmentationPolicy()
    vs = make_variant_set(img, policy, base_seed=5, count=3)
    assert len(vs.variants) == 3
    assert vs.pair_count == 3  # C(3,2)
    vs2 = make_variant_set(img, policy, base_seed=5, count=3)
    for a, b in zip(vs.variants, vs2.variants):
        np.testing.assert_array_equal(a.pixels, b.pixels)
    with pytest.raises(ValueError):
        make_variant_set(img, policy, 5, count=1)


def test_variant_set_identity_policy():
    img = ramp_image()
    policy = AugmentationPolicy(kinds=(CorruptionKind.IDENTITY,))
    vs = make_variant_set(img, policy, base_seed=0)
    for v in vs.variants:
        np.testing.assert_array_equal(v.pixels, img.pixels)
