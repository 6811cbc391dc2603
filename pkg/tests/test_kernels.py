"""numba and numpy kernel paths agree."""

import numpy as np
import pytest

from skdssl import kernels
from skdssl.augment import gaussian_kernel

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_agree(stride, dtype):
    rng = np.random.default_rng(stride)
    xp = rng.standard_normal((3, 2, 9, 8)).astype(dtype)
    ho, wo = (9 - 3) // stride + 1, (8 - 3) // stride + 1
    impl = kernels.implementations("im2col")
    a = impl["numpy"](xp, 3, 3, stride, ho, wo)
    b = impl["numba"](xp, 3, 3, stride, ho, wo)
    np.testing.assert_array_equal(a, b)
    back = kernels.implementations("col2im")
    np.testing.assert_allclose(back["numpy"](a, xp.shape, 3, 3, stride, ho, wo),
                               back["numba"](a, xp.shape, 3, 3, stride, ho, wo), rtol=1e-6, atol=1e-6)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 3, 7, 7))
    cols = kernels.im2col(xp, 3, 3, 2, 3, 3)
    r = rng.standard_normal(cols.shape)
    lhs = (cols * r).sum()
    rhs = (xp * kernels.col2im(r, xp.shape, 3, 3, 2, 3, 3)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_agree():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    fwd = kernels.implementations("maxpool_forward")
    (oa, aa), (ob, ab) = fwd["numpy"](x, 2, 2), fwd["numba"](x, 2, 2)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(aa, ab)
    g = rng.standard_normal(oa.shape)
    bwd = kernels.implementations("maxpool_backward")
    np.testing.assert_allclose(bwd["numpy"](g, aa, x.shape, 2, 2), bwd["numba"](g, aa, x.shape, 2, 2))


@pytest.mark.parametrize("box", [(0, 0, 20, 30), (3, 5, 11, 7), (10, 2, 1, 1)])
def test_crop_resize_agree(box):
    img = np.random.default_rng(2).random((24, 40))
    impl = kernels.implementations("crop_resize")
    np.testing.assert_allclose(impl["numpy"](img, *box, 16, 12), impl["numba"](img, *box, 16, 12), atol=1e-12)


def test_crop_resize_identity_at_native_size():
    img = np.random.default_rng(3).random((10, 10))
    for fn in kernels.implementations("crop_resize").values():
        np.testing.assert_allclose(fn(img, 0, 0, 10, 10, 10, 10), img, atol=1e-12)


def test_blur_agree_and_reflect():
    img = np.random.default_rng(4).random((12, 9))
    k = gaussian_kernel(1.3, 9)
    impl = kernels.implementations("blur")
    a = impl["numpy"](img, k)
    np.testing.assert_allclose(a, impl["numba"](img, k), atol=1e-12)
    # reflect padding, separable: compare with a direct 2-d sum
    p = np.pad(img, 4, mode="reflect")
    k2 = np.outer(k, k)
    direct = np.array([[(p[i:i + 9, j:j + 9] * k2).sum() for j in range(9)] for i in range(12)])
    np.testing.assert_allclose(a, direct, atol=1e-12)
