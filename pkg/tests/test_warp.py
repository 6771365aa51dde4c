import numpy as np
import pytest

from alignkit.errors import DegenerateConfiguration, DegenerateWarp
from alignkit.warp import (
    Homography,
    WarpParams,
    apply_homography,
    conjugate_by_scale,
    corner_displacements,
    grid_corners,
    homography_from_corner_offsets,
    update_inverse_compositional,
    warp_jacobian,
    warp_point,
)


def test_warp_point_identity():
    p = WarpParams.identity()
    np.testing.assert_allclose(warp_point(p, (3.5, -2.0)), [3.5, -2.0])


def test_warp_point_pure_translation():
    p = WarpParams.translation(2.0, 0.0)
    np.testing.assert_allclose(warp_point(p, (3.0, 7.0)), [5.0, 7.0])


def test_warp_point_projective_denominator():
    # p7 = 0.1: point (10, 0) has denominator 1 + 0.1*10 = 2.
    p = WarpParams([0, 0, 0, 0, 0, 0, 0.1, 0])
    np.testing.assert_allclose(warp_point(p, (10.0, 0.0)), [5.0, 0.0])


def test_warp_point_at_infinity_raises():
    p = WarpParams([0, 0, 0, 0, 0, 0, 0.1, 0])
    with pytest.raises(DegenerateWarp):
        warp_point(p, (-10.0, 0.0))


def test_matrix_layout():
    p = WarpParams([0.1, 0.2, 0.3, 0.4, 5.0, 6.0, 0.007, 0.008])
    expected = np.array([[1.1, 0.3, 5.0], [0.2, 1.4, 6.0], [0.007, 0.008, 1.0]])
    np.testing.assert_allclose(p.matrix(), expected)


def test_params_matrix_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = WarpParams(rng.uniform(-0.2, 0.2, 8) * np.array([1, 1, 1, 1, 20, 20, 0.01, 0.01]))
        q = p.to_homography().params()
        np.testing.assert_allclose(q.p, p.p, atol=1e-12)


def test_homography_normalizes_scale():
    h = Homography(2.0 * np.eye(3))
    np.testing.assert_allclose(h.m, np.eye(3))
    np.testing.assert_allclose(h.params().p, np.zeros(8))


def test_homography_vanishing_scale_raises():
    m = np.eye(3)
    m[2, 2] = 0.0
    with pytest.raises(DegenerateWarp):
        Homography(m)


def test_homography_matrix_is_frozen():
    h = Homography.identity()
    with pytest.raises(ValueError):
        h.m[0, 0] = 2.0


def test_jacobian_at_origin():
    expected = np.array([[0, 0, 0, 0, 1, 0, 0, 0], [0, 0, 0, 0, 0, 1, 0, 0]], dtype=float)
    np.testing.assert_allclose(warp_jacobian((0.0, 0.0)), expected)


def test_jacobian_at_2_3():
    expected = np.array(
        [[2, 0, 3, 0, 1, 0, -4, -6], [0, 2, 0, 3, 0, 1, -6, -9]], dtype=float
    )
    np.testing.assert_allclose(warp_jacobian((2.0, 3.0)), expected)


def test_jacobian_at_1_1():
    expected = np.array(
        [[1, 0, 1, 0, 1, 0, -1, -1], [0, 1, 0, 1, 0, 1, -1, -1]], dtype=float
    )
    np.testing.assert_allclose(warp_jacobian((1.0, 1.0)), expected)


def test_jacobian_matches_finite_differences():
    """Each column of the Jacobian is the parameter derivative of warp_point."""
    rng = np.random.default_rng(42)
    h = 1e-6
    for _ in range(100):
        x = rng.uniform(-100, 100, 2)
        jac = warp_jacobian(x)
        for k in range(8):
            e = np.zeros(8)
            e[k] = h
            fd = (warp_point(WarpParams(e), x) - warp_point(WarpParams(-e), x)) / (2 * h)
            tol = 1e-6 * np.maximum(1.0, np.abs(jac[:, k]))
            assert np.all(np.abs(fd - jac[:, k]) <= tol), (x, k, fd, jac[:, k])


def test_update_identity_with_translation_delta():
    h = update_inverse_compositional(Homography.identity(), WarpParams.translation(1.0, 0.0))
    np.testing.assert_allclose(h.m, Homography.translation(-1.0, 0.0).m, atol=1e-12)


def test_update_scale_with_translation_delta():
    # diag(2, 2, 1) composed with T(1, 0)^-1 moves the translation to -2.
    current = Homography(np.diag([2.0, 2.0, 1.0]))
    h = update_inverse_compositional(current, WarpParams.translation(1.0, 0.0))
    expected = np.array([[2.0, 0.0, -2.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(h.m, expected, atol=1e-12)


def test_update_singular_delta_raises():
    bad = WarpParams([-1.0, 0, 0, -1.0, 0, 0, 0, 0])  # matrix rank 1
    with pytest.raises(DegenerateWarp):
        update_inverse_compositional(Homography.identity(), bad)


def test_update_sequence_matches_matrix_product():
    """A chain of inverse-compositional updates equals the left-to-right
    product of the inverted delta matrices."""
    rng = np.random.default_rng(3)
    h = Homography.identity()
    oracle = np.eye(3)
    for _ in range(20):
        d = WarpParams(rng.uniform(-0.05, 0.05, 8) * np.array([1, 1, 1, 1, 5, 5, 0.002, 0.002]))
        h = update_inverse_compositional(h, d)
        oracle = oracle @ np.linalg.inv(d.matrix())
    np.testing.assert_allclose(h.m, oracle / oracle[2, 2], atol=1e-9)


def test_conjugate_scales_translation():
    h = Homography.translation(3.0, -4.0)
    out = conjugate_by_scale(h, 2.0)
    np.testing.assert_allclose(out.m, Homography.translation(6.0, -8.0).m)


def test_conjugate_halves_projective_terms():
    p = WarpParams([0, 0, 0, 0, 0, 0, 0.1, 0])
    out = conjugate_by_scale(p.to_homography(), 2.0)
    np.testing.assert_allclose(out.params().p[6], 0.05)


def test_conjugate_matches_matrix_oracle():
    rng = np.random.default_rng(11)
    for s in (0.5, 2.0, 4.0):
        m = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)) * np.array(
            [[1, 1, 10], [1, 1, 10], [0.001, 0.001, 0.2]]
        )
        h = Homography(m)
        sm = np.diag([s, s, 1.0])
        oracle = sm @ h.m @ np.linalg.inv(sm)
        np.testing.assert_allclose(conjugate_by_scale(h, s).m, oracle / oracle[2, 2], atol=1e-12)


def test_conjugate_round_trips():
    h = Homography(np.array([[1.05, 0.02, 3.0], [-0.01, 0.98, -2.0], [1e-4, -2e-4, 1.0]]))
    back = conjugate_by_scale(conjugate_by_scale(h, 4.0), 0.25)
    np.testing.assert_allclose(back.m, h.m, atol=1e-12)


def test_four_point_identity():
    c = grid_corners(11, 11)
    h = homography_from_corner_offsets(c, c)
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-9)


def test_four_point_translation():
    c = grid_corners(11, 21)
    h = homography_from_corner_offsets(c, c + [2.0, 3.0])
    np.testing.assert_allclose(h.m, Homography.translation(2.0, 3.0).m, atol=1e-9)


def test_four_point_reprojects_random_quads():
    rng = np.random.default_rng(5)
    src = grid_corners(100, 100)
    for _ in range(50):
        dst = src + rng.uniform(-20, 20, (4, 2))
        h = homography_from_corner_offsets(src, dst)
        np.testing.assert_allclose(h.apply(src), dst, atol=1e-8)


def test_four_point_collinear_raises():
    src = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateConfiguration):
        homography_from_corner_offsets(src, grid_corners(2, 2))


def test_compose_matches_pointwise_application():
    rng = np.random.default_rng(9)
    src = grid_corners(50, 50)
    h1 = homography_from_corner_offsets(src, src + rng.uniform(-5, 5, (4, 2)))
    h2 = homography_from_corner_offsets(src, src + rng.uniform(-5, 5, (4, 2)))
    pts = rng.uniform(0, 49, (30, 2))
    np.testing.assert_allclose(
        h1.compose(h2).apply(pts), h1.apply(h2.apply(pts)), atol=1e-9
    )


def test_inverse_round_trip():
    rng = np.random.default_rng(13)
    src = grid_corners(64, 64)
    for _ in range(100):
        h = homography_from_corner_offsets(src, src + rng.uniform(-12, 12, (4, 2)))
        np.testing.assert_allclose(h.compose(h.inverse()).m, np.eye(3), atol=1e-9)
        pts = rng.uniform(0, 63, (10, 2))
        np.testing.assert_allclose(h.inverse().apply(h.apply(pts)), pts, atol=1e-7)


def test_apply_homography_shapes():
    m = Homography.translation(1.0, 2.0).m
    one = apply_homography(m, np.array([3.0, 4.0]))
    assert one.shape == (2,)
    np.testing.assert_allclose(one, [4.0, 6.0])
    many = apply_homography(m, np.zeros((5, 2)))
    assert many.shape == (5, 2)


def test_apply_homography_infinity_raises():
    m = np.array([[1.0, 0, 0], [0, 1.0, 0], [-0.1, 0, 1.0]])
    with pytest.raises(DegenerateWarp):
        apply_homography(m, np.array([10.0, 0.0]))


def test_grid_corners_order():
    np.testing.assert_allclose(
        grid_corners(5, 9), [[0, 0], [8, 0], [8, 4], [0, 4]]
    )


def test_corner_displacements_translation():
    h = Homography.translation(3.0, 4.0)
    d = corner_displacements(h, grid_corners(10, 10))
    np.testing.assert_allclose(d, [5.0, 5.0, 5.0, 5.0])
