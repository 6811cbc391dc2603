import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skdssl.augment import (FIRST, SECOND, AugmentationConfig, derive_stream, gaussian_kernel,
                            hflip, mix_seed, sample_view, two_views)
from skdssl.errors import ContractError, InputError


def test_same_stream_same_view():
    img = np.random.default_rng(0).random((64, 64))
    cfg = AugmentationConfig(view_size=32)
    a = sample_view(img, cfg, derive_stream(1, 2, 3, FIRST)).pixels
    b = sample_view(img, cfg, derive_stream(1, 2, 3, FIRST)).pixels
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_constant_image_stays_constant(seed):
    cfg = AugmentationConfig(view_size=24, blur_probability=1.0)
    view = sample_view(np.full((40, 50), 0.37), cfg, derive_stream(seed, 0, 0, 0))
    np.testing.assert_allclose(view.pixels, 0.37, atol=1e-12)


def test_default_view_size():
    view = sample_view(np.random.default_rng(0).random((224, 224)), AugmentationConfig(), derive_stream(0, 0, 0, 0))
    assert view.pixels.shape == (112, 112)
    assert 0.0 <= view.pixels.min() and view.pixels.max() <= 1.0


def test_too_small_image():
    with pytest.raises(InputError):
        sample_view(np.zeros((20, 20)), AugmentationConfig(view_size=112), derive_stream(0, 0, 0, 0))


def test_streams_for_the_two_slots_differ():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s, e, i = (int(v) for v in rng.integers(0, 2**40, size=3))
        a = derive_stream(s, e, i, FIRST).random(8)
        b = derive_stream(s, e, i, SECOND).random(8)
        assert not np.array_equal(a, b)


def test_stream_identical_tuples():
    np.testing.assert_array_equal(derive_stream(5, 1, 9, 0).random(16), derive_stream(5, 1, 9, 0).random(16))


def test_mix_seed_is_64_bit_and_distinct():
    seeds = {mix_seed(s, e, i, v) for s in range(4) for e in range(4) for i in range(8) for v in range(2)}
    assert len(seeds) == 4 * 4 * 8 * 2
    assert all(0 <= x < 2**64 for x in seeds)


def test_views_independent_of_processing_order():
    rng = np.random.default_rng(1)
    images = rng.random((6, 40, 40))
    idx = np.arange(10, 16)
    cfg = AugmentationConfig(view_size=16)
    a1, a2 = two_views(images, idx, cfg, seed=3, epoch=2)
    perm = np.array([5, 2, 0, 4, 1, 3])
    b1, b2 = two_views(images[perm], idx[perm], cfg, seed=3, epoch=2)
    np.testing.assert_array_equal(a1[perm], b1)
    np.testing.assert_array_equal(a2[perm], b2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_double_flip_is_identity(h, w, seed):
    img = np.random.default_rng(seed).random((h, w))
    np.testing.assert_array_equal(hflip(hflip(img)), img)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 2.0))
def test_blur_kernel_normalized(sigma):
    k = gaussian_kernel(sigma, 9)
    assert abs(k.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(k, k[::-1])


@pytest.mark.parametrize("kwargs", [
    dict(crop_area_range=(0.0, 1.0)), dict(crop_area_range=(0.5, 1.2)), dict(view_size=4), dict(blur_kernel=8),
])
def test_config_invariants(kwargs):
    with pytest.raises(ContractError):
        AugmentationConfig(**kwargs)
