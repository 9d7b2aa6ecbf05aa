import numpy as np
import pytest

from boxrefine.errors import DataError
from boxrefine.geometry import (
    Box7,
    PointCloud,
    box_corners,
    crop_context,
    nbv_inverse,
    nbv_jacobian,
    nbv_points,
    nbv_transform,
    wrap_angle,
)


def homogeneous_nbv_oracle(points, box):
    """Independent oracle: compose the three homogeneous matrices explicitly."""
    x, y, z, w, l, h, theta = box
    scale = np.diag([2.0 / l, 2.0 / w, 2.0 / h, 1.0])
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array(
        [
            [c, s, 0.0, 0.0],
            [-s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    trans = np.eye(4)
    trans[:3, 3] = [-x, -y, -z]
    m = scale @ rot @ trans
    hom = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    return (m @ hom.T).T[:, :3]


def random_box(rng):
    return np.array(
        [
            rng.uniform(-20, 20),
            rng.uniform(-20, 20),
            rng.uniform(-2, 2),
            rng.uniform(0.5, 4.0),
            rng.uniform(0.5, 6.0),
            rng.uniform(0.5, 3.0),
            rng.uniform(-np.pi, np.pi),
        ]
    )


class TestNbvTransform:
    def test_unit_cube_identity(self):
        box = np.array([0, 0, 0, 2, 2, 2, 0.0])
        out = nbv_transform(np.array([[1.0, 1.0, 1.0]]), box)
        np.testing.assert_allclose(out.points, [[1, 1, 1]], atol=1e-12)

    def test_translate_then_scale(self):
        box = np.array([3, -2, 1, 2, 4, 2, 0.0])
        out = nbv_transform(np.array([[5.0, -1.0, 2.0]]), box)
        np.testing.assert_allclose(out.points, [[1, 1, 1]], atol=1e-12)

    def test_quarter_turn_matches_matrix_oracle(self):
        box = np.array([0, 0, 0, 2, 4, 2, np.pi / 2])
        pts = np.array([[0.0, 2.0, 0.0]])
        expected = homogeneous_nbv_oracle(pts, box)
        np.testing.assert_allclose(expected, [[1, 0, 0]], atol=1e-12)
        np.testing.assert_allclose(nbv_transform(pts, box).points, expected, atol=1e-12)

    def test_matches_matrix_oracle_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            box = random_box(rng)
            pts = rng.uniform(-25, 25, size=(17, 3))
            np.testing.assert_allclose(
                nbv_transform(pts, box).points,
                homogeneous_nbv_oracle(pts, box),
                atol=1e-10,
            )

    def test_rejects_nonfinite_points(self):
        box = np.array([0, 0, 0, 1, 1, 1, 0.0])
        with pytest.raises(DataError):
            nbv_transform(np.array([[np.nan, 0, 0]]), box)

    def test_rejects_bad_box(self):
        with pytest.raises(DataError):
            nbv_transform(np.zeros((1, 3)), np.array([0, 0, 0, -1, 1, 1, 0.0]))

    def test_scale_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            box = random_box(rng)
            pts = rng.uniform(-25, 25, size=(11, 3))
            s = rng.uniform(0.1, 15.0)
            scaled_box = box.copy()
            scaled_box[:6] *= s
            base = nbv_transform(pts, box).points
            scaled = nbv_transform(pts * s, scaled_box).points
            np.testing.assert_allclose(scaled, base, atol=1e-9)


class TestNbvInverse:
    def test_round_trips_examples(self):
        boxes = [
            np.array([0, 0, 0, 2, 2, 2, 0.0]),
            np.array([3, -2, 1, 2, 4, 2, 0.0]),
            np.array([0, 0, 0, 2, 4, 2, np.pi / 2]),
        ]
        pts = np.array([[1.0, 1.0, 1.0], [5.0, -1.0, 2.0], [0.0, 2.0, 0.0]])
        for box in boxes:
            nbv = nbv_transform(pts, box)
            back = nbv_inverse(nbv, box)
            np.testing.assert_allclose(back.points, pts, atol=1e-9)

    def test_origin_maps_to_center(self):
        box = np.array([4.0, -7.0, 1.5, 1.0, 2.0, 3.0, 0.77])
        out = nbv_inverse(np.zeros((1, 3)), box)
        np.testing.assert_allclose(out.points, [box[:3]], atol=1e-12)

    def test_corner_point(self):
        box = np.array([0, 0, 0, 2, 4, 2, 0.0])
        out = nbv_inverse(np.array([[1.0, 1.0, 1.0]]), box)
        np.testing.assert_allclose(out.points, [[2.0, 1.0, 1.0]], atol=1e-12)

    def test_round_trip_random(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            box = random_box(rng)
            pts = rng.uniform(-40, 40, size=(23, 3))
            back = nbv_inverse(nbv_transform(pts, box), box)
            np.testing.assert_allclose(back.points, pts, atol=1e-9)


class TestNbvJacobian:
    def test_center_point_partials(self):
        box = np.array([0, 0, 0, 2, 4, 2, 0.0])
        jac = nbv_jacobian(np.zeros((1, 3)), box)
        assert jac[0, 0, 0] == pytest.approx(-2.0 / 4.0)
        # all size-partials vanish at the center
        np.testing.assert_allclose(jac[0, :, 3:6], 0.0, atol=1e-15)

    def test_length_partial_at_face(self):
        l = 4.0
        box = np.array([1.0, 2.0, 0.0, 2.0, l, 2.0, 0.0])
        pts = np.array([[1.0 + l / 2.0, 2.0, 0.0]])
        jac = nbv_jacobian(pts, box)
        assert jac[0, 0, 4] == pytest.approx(-1.0 / l)

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(42)
        step = 1e-5
        for _ in range(100):
            box = random_box(rng)
            pt = box[:3] + rng.uniform(-6, 6, size=3)
            jac = nbv_jacobian(pt[None, :], box)[0]
            fd = np.zeros((3, 7))
            for k in range(7):
                hi, lo = box.copy(), box.copy()
                hi[k] += step
                lo[k] -= step
                fd[:, k] = (nbv_points(pt[None, :], hi)[0] - nbv_points(pt[None, :], lo)[0]) / (2 * step)
            np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-8)


class TestBoxCorners:
    def test_unit_cube(self):
        box = np.array([0, 0, 0, 2, 2, 2, 0.0])
        corners = box_corners(box)
        expected = {(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
        got = {tuple(np.round(c, 9)) for c in corners}
        assert got == expected

    def test_half_turn_same_corner_set(self):
        box0 = np.array([1, 2, 3, 2, 4, 2, 0.3])
        box1 = box0.copy()
        box1[6] = wrap_angle(box0[6] + np.pi)
        c0 = np.round(np.sort(box_corners(box0), axis=0), 9)
        c1 = np.round(np.sort(box_corners(box1), axis=0), 9)
        np.testing.assert_allclose(c0, c1, atol=1e-9)

    def test_corners_round_trip_to_signs(self):
        box = np.array([1, 2, 3, 2, 4, 2, np.pi / 4])
        nbv = nbv_transform(box_corners(box), box)
        signs = np.sort(np.round(nbv.points, 9).view("f8,f8,f8"), axis=0)
        expected = np.sort(
            np.array([(sx, sy, sz) for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)], dtype="f8,f8,f8")[:, None],
            axis=0,
        )
        assert np.array_equal(signs, expected)


class TestCropContext:
    def test_context_one_keeps_inside(self):
        box = np.array([0, 0, 0, 2, 2, 2, 0.0])
        pts = np.array([[0.5, 0, 0], [0.999, 0.999, 0.999], [1.001, 0, 0], [3, 3, 3]])
        kept = crop_context(pts, box, 1.0)
        assert list(kept.source_indices) == [0, 1]

    def test_threshold_semantics_at_four(self):
        box = np.array([0, 0, 0, 2, 2, 2, 0.0])
        pts = np.array([[3.9, 0, 0], [4.1, 0, 0]])
        kept = crop_context(pts, box, 4.0)
        assert list(kept.source_indices) == [0]

    def test_monotone_in_context(self):
        rng = np.random.default_rng(5)
        box = random_box(rng)
        pts = rng.uniform(-30, 30, size=(500, 3))
        inner = set(crop_context(pts, box, 2.0).source_indices.tolist())
        outer = set(crop_context(pts, box, 4.0).source_indices.tolist())
        assert inner <= outer

    def test_context_below_one_rejected(self):
        with pytest.raises(DataError):
            crop_context(np.zeros((1, 3)), np.array([0, 0, 0, 1, 1, 1, 0.0]), 0.5)


class TestTypes:
    def test_box7_wraps_theta(self):
        b = Box7(0, 0, 0, 1, 1, 1, 3 * np.pi)
        assert -np.pi < b.theta <= np.pi
        assert b.theta == pytest.approx(np.pi)

    def test_box7_rejects_nonpositive_extent(self):
        with pytest.raises(DataError):
            Box7(0, 0, 0, 0.0, 1, 1, 0)

    def test_box7_array_protocol(self):
        b = Box7(1, 2, 3, 4, 5, 6, 0.5)
        np.testing.assert_allclose(np.asarray(b), [1, 2, 3, 4, 5, 6, 0.5])

    def test_pointcloud_label_length_checked(self):
        with pytest.raises(DataError):
            PointCloud(points=np.zeros((3, 3)), labels=np.zeros(2, dtype=int))

    def test_wrap_angle_boundary(self):
        assert wrap_angle(np.pi) == pytest.approx(np.pi)
        assert wrap_angle(-np.pi) == pytest.approx(np.pi)
        assert wrap_angle(0.0) == 0.0
