import numpy as np
import pytest
from scipy import ndimage

from lipfield import kernels
from lipfield.fields import star_polygon

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def _poly_sdf_reference(points, verts):
    # brute force point-segment distance plus even-odd crossing test
    out = []
    m = len(verts)
    for p in points:
        d = np.inf
        inside = False
        for i in range(m):
            a, b = verts[i], verts[(i + 1) % m]
            ab = b - a
            s = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1)
            d = min(d, np.linalg.norm(p - a - s * ab))
            if (a[1] > p[1]) != (b[1] > p[1]):
                xc = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
                if p[0] < xc:
                    inside = not inside
        out.append(-d if inside else d)
    return np.array(out)


def test_polygon_sdf_numpy_against_reference():
    v = star_polygon().verts
    p = np.random.default_rng(0).random((300, 2))
    np.testing.assert_allclose(kernels.NUMPY_KERNELS["polygon_sdf"](p, v),
                               _poly_sdf_reference(p, v), atol=1e-12)


def test_edt_matches_scipy():
    rng = np.random.default_rng(1)
    for shape in [(28, 28), (17, 31), (1, 9)]:
        mask = rng.random(shape) < 0.1
        mask[0, 0] = True
        ref = ndimage.distance_transform_edt(~mask) ** 2
        np.testing.assert_allclose(kernels.NUMPY_KERNELS["edt_sq"](mask), ref, atol=1e-9)


def test_edt_empty_mask_is_inf():
    assert np.all(np.isinf(kernels.edt_sq(np.zeros((4, 5), bool))))


def test_min_dists():
    a = np.array([[0.0, 0.0], [1.0, 1.0]])
    b = np.array([[3.0, 4.0], [1.0, 2.0]])
    np.testing.assert_allclose(kernels.min_dists(a, b), [np.sqrt(5), 1.0])


@needs_numba
@pytest.mark.parametrize("name", ["polygon_sdf", "min_dists", "edt_sq", "march_cells"])
def test_numba_matches_numpy(name):
    rng = np.random.default_rng(2)
    if name == "polygon_sdf":
        args = (rng.random((500, 2)), star_polygon().verts)
    elif name == "min_dists":
        args = (rng.random((200, 2)), rng.random((300, 2)))
    elif name == "edt_sq":
        args = (rng.random((30, 23)) < 0.05,)
    else:
        g = rng.standard_normal((20, 25))
        args = (g, 0.1)
    a = kernels.NUMPY_KERNELS[name](*args)
    b = kernels.NUMBA_KERNELS[name](*args)
    if name == "march_cells":
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_allclose(a[1], b[1], atol=1e-14)
    else:
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_table_has_sixteen_cases():
    assert kernels.MS_TABLE.shape[0] == 16
