import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from geomatch.errors import InvalidInputError
from geomatch.geometry import (
    CompositeTransform,
    IDENTITY_AFFINE,
    affine_apply,
    affine_compose,
    affine_inverse,
    affine_jacobian,
    bilinear_sample,
    composite_apply,
    composite_inverse_apply,
    composite_jacobian,
    composite_spatial_jacobian,
    control_points,
    make_grid,
    tps_apply,
    tps_jacobian,
    tps_solve,
    warp_image,
)


def central_diff(f, x, h=1e-6):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# ----------------------------------------------------------------- affine

def test_affine_identity():
    assert np.array_equal(affine_apply(IDENTITY_AFFINE, [(0.3, -0.5)]), [[0.3, -0.5]])


def test_affine_translation():
    assert np.allclose(affine_apply([1, 0, 0.2, 0, 1, 0], [(0, 0)]), [[0.2, 0.0]], atol=0)


def test_affine_rotation_basis_point():
    assert np.allclose(affine_apply([0, -1, 0, 1, 0, 0], [(1, 0)]), [[0, 1]], atol=0)


def test_affine_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        affine_apply([1, 0, np.nan, 0, 1, 0], [(0, 0)])
    with pytest.raises(InvalidInputError):
        affine_apply(IDENTITY_AFFINE, [(np.inf, 0)])


def test_affine_jacobian_columns():
    j = affine_jacobian([(0, 0)])
    assert j[0, 2] == 1 and j[0, 0] == 0
    j = affine_jacobian([(1, 0)])
    assert j[0, 0] == 1 and j[1, 3] == 1


def test_affine_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pts = rng.uniform(-1, 1, (7, 2))
        a = IDENTITY_AFFINE + rng.normal(0, 0.3, 6)
        fd = central_diff(lambda x: affine_apply(x, pts).ravel(), a)
        assert rel_err(affine_jacobian(pts), fd) <= 1e-7


finite = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=6, max_size=6),
       st.lists(st.tuples(finite, finite), min_size=1, max_size=10))
def test_affine_sequential_equals_matrix_product(a, b, pts):
    seq = affine_apply(a, affine_apply(b, pts))
    single = affine_apply(affine_compose(a, b), pts)
    assert np.max(np.abs(seq - single)) <= 1e-12


def test_affine_inverse_round_trip():
    rng = np.random.default_rng(1)
    a = IDENTITY_AFFINE + rng.normal(0, 0.2, 6)
    pts = rng.uniform(-1, 1, (10, 2))
    assert np.allclose(affine_apply(affine_inverse(a), affine_apply(a, pts)), pts, atol=1e-12)


# ----------------------------------------------------------------- TPS

def direct_tps(offsets, probe):
    """Independent dense TPS: build and solve the full interpolation system with loops."""
    c = control_points()
    tgt = c + np.stack([offsets[:9], offsets[9:]], axis=1)

    def u(a, b):
        r2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
        return 0.0 if r2 == 0 else r2 * np.log(r2)

    mat = np.zeros((12, 12))
    for i in range(9):
        for j in range(9):
            mat[i, j] = u(c[i], c[j])
        mat[i, 9:] = [1.0, c[i, 0], c[i, 1]]
        mat[9:, i] = [1.0, c[i, 0], c[i, 1]]
    rhs = np.zeros((12, 2))
    rhs[:9] = tgt
    sol = linalg.solve(mat, rhs)
    out = []
    for p in np.atleast_2d(probe):
        v = sol[9] + p[0] * sol[10] + p[1] * sol[11]
        for i in range(9):
            v = v + sol[i] * u(p, c[i])
        out.append(v)
    return np.array(out)


def test_tps_zero_offsets_identity():
    co = tps_solve(np.zeros(18))
    assert np.max(np.abs(co.weights)) <= 1e-9
    assert np.allclose(co.affine_part, IDENTITY_AFFINE, atol=1e-9)
    pts = np.random.default_rng(0).uniform(-1.5, 1.5, (1000, 2))
    assert np.max(np.abs(tps_apply(co, pts) - pts)) <= 1e-9


def test_tps_reproduces_affine_without_bending():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = IDENTITY_AFFINE + rng.normal(0, 0.3, 6)
        c = control_points()
        disp = affine_apply(a, c) - c
        co = tps_solve(np.concatenate([disp[:, 0], disp[:, 1]]))
        assert np.max(np.abs(co.weights)) <= 1e-9
        assert np.allclose(co.affine_part, a, atol=1e-9)


def test_tps_single_control_displacement():
    off = np.zeros(18)
    off[4] = 0.1  # center control, x
    co = tps_solve(off)
    assert np.allclose(tps_apply(co, [(0.0, 0.0)]), [[0.1, 0.0]], atol=1e-9)
    probe = np.array([[0.37, -0.61]])
    assert np.allclose(tps_apply(co, probe), direct_tps(off, probe), atol=1e-12)


def test_tps_interpolation_and_side_conditions():
    rng = np.random.default_rng(3)
    c = control_points()
    for _ in range(100):
        off = rng.normal(0, 0.1, 18)
        co = tps_solve(off)
        tgt = c + np.stack([off[:9], off[9:]], axis=1)
        assert np.max(np.abs(tps_apply(co, c) - tgt)) <= 1e-9
        assert np.max(np.abs(co.weights.sum(axis=0))) <= 1e-9
        assert np.max(np.abs(c.T @ co.weights)) <= 1e-9


def test_tps_apply_matches_direct_evaluation():
    rng = np.random.default_rng(4)
    for _ in range(10):
        off = rng.normal(0, 0.1, 18)
        pts = rng.uniform(-1.2, 1.2, (25, 2))
        assert np.allclose(tps_apply(tps_solve(off), pts), direct_tps(off, pts), atol=1e-12)


def test_tps_jacobian_at_control_point():
    c = control_points()
    j = tps_jacobian(c[[2]])
    expected = np.zeros(9)
    expected[2] = 1.0
    assert np.allclose(j[0, :9], expected, atol=1e-12)
    assert np.allclose(j[1, 9:], expected, atol=1e-12)
    assert np.allclose(j[0, 9:], 0) and np.allclose(j[1, :9], 0)


def test_tps_jacobian_partition_of_unity():
    pts = np.random.default_rng(5).uniform(-1, 1, (50, 2))
    j = tps_jacobian(pts)
    assert np.allclose(j[0::2, :9].sum(axis=1), 1.0, atol=1e-12)


def test_tps_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(100):
        pts = rng.uniform(-1.2, 1.2, (5, 2))
        off = rng.normal(0, 0.1, 18)
        fd = central_diff(lambda x: tps_apply(tps_solve(x), pts).ravel(), off)
        assert rel_err(tps_jacobian(pts), fd) <= 1e-7


def test_tps_jacobian_rejects_empty():
    with pytest.raises(InvalidInputError):
        tps_jacobian(np.zeros((0, 2)))


# ----------------------------------------------------------------- composite

def test_composite_identity():
    pts = np.random.default_rng(7).uniform(-1, 1, (30, 2))
    assert np.array_equal(composite_apply(CompositeTransform.identity(), pts), pts)


def test_composite_translation():
    t = CompositeTransform([1, 0, 0.1, 0, 1, 0])
    assert np.allclose(composite_apply(t, [(0, 0)]), [[0.1, 0]], atol=0)


def test_composite_equals_two_step_application():
    rng = np.random.default_rng(8)
    for _ in range(20):
        t = CompositeTransform(IDENTITY_AFFINE + rng.normal(0, 0.2, 6), rng.normal(0, 0.1, 18))
        pts = rng.uniform(-1, 1, (20, 2))
        manual = affine_apply(t.affine, tps_apply(tps_solve(t.tps), pts))
        assert np.array_equal(composite_apply(t, pts), manual)


def test_composite_jacobians_match_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(100):
        t = CompositeTransform(IDENTITY_AFFINE + rng.normal(0, 0.2, 6), rng.normal(0, 0.1, 18))
        pts = rng.uniform(-1, 1, (4, 2))
        fd = central_diff(lambda x: composite_apply(CompositeTransform.from_vector(x), pts).ravel(), t.as_vector())
        assert rel_err(composite_jacobian(t, pts), fd) <= 1e-5
        for k in range(pts.shape[0]):
            fd_p = central_diff(lambda q: composite_apply(t, q.reshape(1, 2))[0], pts[k])
            assert rel_err(composite_spatial_jacobian(t, pts[[k]])[0], fd_p) <= 1e-5


def test_composite_inverse():
    rng = np.random.default_rng(10)
    t = CompositeTransform(IDENTITY_AFFINE + rng.normal(0, 0.1, 6), rng.normal(0, 0.05, 18))
    pts = rng.uniform(-0.8, 0.8, (50, 2))
    q = composite_inverse_apply(t, pts)
    assert np.max(np.abs(composite_apply(t, q) - pts)) <= 1e-12


# ----------------------------------------------------------------- grids

def test_grid_corners():
    assert np.array_equal(make_grid(2, 2), [[-1, -1], [1, -1], [-1, 1], [1, 1]])


def test_grid_center():
    g = make_grid(3, 3)
    assert any(np.array_equal(p, [0, 0]) for p in g)


def test_grid_default_size():
    g = make_grid(20, 20)
    assert g.shape == (400, 2)
    xs = g[:20, 0]
    assert np.allclose(np.diff(xs), 2 / 19, rtol=0, atol=1e-15)
    assert xs[0] == -1 and xs[-1] == 1
    assert np.all(np.diff(xs) > 0) and np.all(np.diff(g[::20, 1]) > 0)


@pytest.mark.parametrize("dims", [(1, 5), (5, 1), (0, 0)])
def test_grid_rejects_small(dims):
    with pytest.raises(InvalidInputError):
        make_grid(*dims)


# ----------------------------------------------------------------- warping

@pytest.mark.parametrize("shape", [(16, 16, 3), (15, 21), (7, 9, 2)])
def test_warp_identity_bit_exact(shape):
    img = np.random.default_rng(11).random(shape)
    out = warp_image(img, CompositeTransform.identity())
    assert np.array_equal(out, img)


def test_warp_one_pixel_shift():
    img = np.arange(48, dtype=float).reshape(6, 8)
    t = CompositeTransform([1, 0, 2 / 8, 0, 1, 0])
    out = warp_image(img, t)
    assert np.array_equal(out[:, :-1], img[:, 1:])
    assert np.all(out[:, -1] == 0)


def test_warp_constant_image():
    img = np.full((32, 32), 0.7)
    rng = np.random.default_rng(12)
    t = CompositeTransform(IDENTITY_AFFINE + np.array([-0.2, 0.05, 0.02, -0.05, -0.2, 0.01]), rng.normal(0, 0.02, 18))
    out = warp_image(img, t)
    assert np.allclose(out, 0.7, atol=1e-12)


def test_warp_rejects_empty():
    with pytest.raises(InvalidInputError):
        warp_image(np.zeros((0, 4)), CompositeTransform.identity())


def test_bilinear_midpoint():
    img = np.array([[0.0, 1.0]])
    assert np.isclose(bilinear_sample(img, [(0.0, 0.0)])[0], 0.5)
