import numpy as np
import pytest

from boxrefine.geometry import wrap_angle
from boxrefine.iou import bev_iou, iou_3d, nms, pairwise_bev_iou, pairwise_iou_3d


def square(x, y, side=1.0, theta=0.0, z=0.0, h=1.0):
    return np.array([x, y, z, side, side, h, theta])


class TestBevIou:
    def test_identical_boxes(self):
        b = np.array([1.0, 2.0, 0.0, 1.5, 3.0, 1.2, 0.4])
        assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_far_apart(self):
        a = square(0, 0)
        b = square(100, 100)
        assert bev_iou(a, b) == 0.0

    def test_half_offset_squares(self):
        a = square(0, 0)
        b = square(0.5, 0)
        assert bev_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = np.array([*rng.uniform(-2, 2, 2), 0, *rng.uniform(0.5, 3, 2), 1, rng.uniform(-np.pi, np.pi)])
            b = np.array([*rng.uniform(-2, 2, 2), 0, *rng.uniform(0.5, 3, 2), 1, rng.uniform(-np.pi, np.pi)])
            assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-12)

    def test_rotated_square_against_itself_shifted(self):
        # 45-degree rotated unit squares; overlap computed by clipping must
        # match the closed form for two axis-aligned diamonds.
        a = square(0, 0, theta=np.pi / 4)
        b = square(0, 0, theta=np.pi / 4)
        assert bev_iou(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_yaw_periodicity(self):
        rng = np.random.default_rng(1)
        probe = square(0.3, -0.2, side=1.4, theta=0.9)
        for _ in range(25):
            a = np.array([*rng.uniform(-1, 1, 2), 0, *rng.uniform(0.5, 2, 2), 1, rng.uniform(-np.pi, np.pi)])
            flipped = a.copy()
            flipped[6] = wrap_angle(a[6] + np.pi)
            assert bev_iou(a, probe) == pytest.approx(bev_iou(flipped, probe), abs=1e-9)


class TestIou3d:
    def test_identical(self):
        b = np.array([0.0, 0.0, 1.0, 2.0, 4.5, 1.6, -0.7])
        assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_half_height_overlap(self):
        a = square(0, 0, z=0.0, h=1.0)
        b = square(0, 0, z=0.5, h=1.0)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_double_scale(self):
        a = np.array([0, 0, 0, 1.0, 2.0, 1.0, 0.3])
        b = a.copy()
        b[3:6] *= 2.0
        assert iou_3d(a, b) == pytest.approx(1.0 / 8.0, abs=1e-9)

    def test_range_and_self(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = np.array([*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-np.pi, np.pi)])
            b = np.array([*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-np.pi, np.pi)])
            v = iou_3d(a, b)
            assert 0.0 <= v <= 1.0
            assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_heights(self):
        a = square(0, 0, z=0.0, h=1.0)
        b = square(0, 0, z=5.0, h=1.0)
        assert iou_3d(a, b) == 0.0


class TestPairwise:
    def test_matches_scalar(self):
        rng = np.random.default_rng(3)
        boxes_a = np.stack(
            [np.array([*rng.uniform(-3, 3, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-np.pi, np.pi)]) for _ in range(6)]
        )
        boxes_b = np.stack(
            [np.array([*rng.uniform(-3, 3, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-np.pi, np.pi)]) for _ in range(5)]
        )
        mat_bev = pairwise_bev_iou(boxes_a, boxes_b)
        mat_3d = pairwise_iou_3d(boxes_a, boxes_b)
        for i in range(6):
            for j in range(5):
                assert mat_bev[i, j] == pytest.approx(bev_iou(boxes_a[i], boxes_b[j]), abs=1e-12)
                assert mat_3d[i, j] == pytest.approx(iou_3d(boxes_a[i], boxes_b[j]), abs=1e-12)

    def test_empty(self):
        assert pairwise_bev_iou(np.zeros((0, 7)), np.zeros((0, 7))).shape == (0, 0)


class TestNms:
    def test_duplicate_suppressed(self):
        a = square(0, 0)
        kept = nms([(a, 0.9), (a.copy(), 0.8)], threshold=0.1)
        assert kept == [0]

    def test_disjoint_all_kept(self):
        kept = nms([(square(0, 0), 0.5), (square(10, 0), 0.9), (square(20, 0), 0.7)], threshold=0.1)
        assert kept == [1, 2, 0]

    def test_chain_keeps_ends(self):
        a = (square(0.0, 0), 0.9)
        b = (square(0.5, 0), 0.8)
        c = (square(1.0, 0), 0.7)
        kept = nms([a, b, c], threshold=0.1)
        assert kept == [0, 2]

    def test_tie_break_by_input_index(self):
        a = square(0, 0)
        kept = nms([(a, 0.5), (a.copy(), 0.5)], threshold=0.1)
        assert kept == [0]

    def test_output_invariants(self):
        rng = np.random.default_rng(4)
        boxes = [
            (np.array([*rng.uniform(-4, 4, 2), 0, *rng.uniform(0.5, 2, 2), 1, rng.uniform(-np.pi, np.pi)]), rng.uniform(0, 1))
            for _ in range(40)
        ]
        kept = nms(boxes, threshold=0.3)
        assert set(kept) <= set(range(40))
        confs = [boxes[i][1] for i in kept]
        assert confs == sorted(confs, reverse=True)
        for i_pos, i in enumerate(kept):
            for j in kept[i_pos + 1 :]:
                assert bev_iou(boxes[i][0], boxes[j][0]) <= 0.3 + 1e-12

    def test_empty_input(self):
        assert nms([]) == []

    def test_confidence_range_checked(self):
        with pytest.raises(ValueError):
            nms([(square(0, 0), 1.5)])
