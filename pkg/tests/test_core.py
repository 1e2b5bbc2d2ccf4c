import numpy as np
import pytest
import yaml

from posefix.core import (
    Anchor,
    InstanceContext,
    JointRole,
    Keypoint,
    Pose,
    SkeletonSpec,
    Visibility,
    anchor_set,
    load_skeleton,
    pose_bbox_iou,
)

from oracles import COCO_FLIP, COCO_SIGMAS


class TestSkeletonSpec:
    def test_coco_constants(self, spec):
        assert spec.num_joints == 17
        np.testing.assert_allclose(spec.kappa_array, [2 * s for s in COCO_SIGMAS], rtol=0, atol=1e-15)
        for j in range(17):
            assert spec.partner(j) == COCO_FLIP.get(j)

    def test_flip_index_is_involution(self, spec):
        fi = spec.flip_index
        np.testing.assert_array_equal(fi[fi], np.arange(17))
        assert fi[0] == 0

    def test_rejects_non_involution(self):
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b", "c"), ((0, 1), (1, 2)), (0.1, 0.1, 0.1))
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b"), ((0, 0),), (0.1, 0.1))
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b"), ((0, 5),), (0.1, 0.1))

    def test_rejects_bad_kappa(self):
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b"), (), (0.1,))
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b"), (), (0.1, -0.2))
        with pytest.raises(ValueError):
            SkeletonSpec(("a", "b"), (), (0.1, float("nan")))

    def test_file_round_trip(self, spec, tmp_path):
        p = tmp_path / "skel.yaml"
        p.write_text(yaml.safe_dump(spec.to_dict()))
        assert load_skeleton(p) == spec

    def test_index_by_name(self, spec):
        assert spec.index("left_wrist") == 9
        with pytest.raises(KeyError):
            spec.index("tail")


class TestPose:
    def test_coco_round_trip(self):
        flat = [10.5, 20.25, 2, 0, 0, 0, 3.0, 4.0, 1]
        p = Pose.from_coco(flat, score=0.7)
        assert p.to_coco() == flat
        assert p.num_labeled == 2
        assert p.score == 0.7
        np.testing.assert_array_equal(p.labeled, [True, False, True])

    def test_nonfinite_labeled_keypoint(self):
        with pytest.raises(ValueError):
            Keypoint(float("nan"), 0.0)
        Keypoint(float("nan"), 0.0, Visibility.NOT_LABELED)  # unlabeled coordinates are ignored

    def test_translated_keeps_unlabeled(self):
        p = Pose((Keypoint(1, 2), Keypoint.unlabeled()))
        q = p.translated(3, -1)
        assert (q.keypoints[0].x, q.keypoints[0].y) == (4, 1)
        assert q.keypoints[1] == Keypoint.unlabeled()


class TestInstanceContext:
    def test_validation(self):
        p = Pose((Keypoint(0, 0),))
        with pytest.raises(ValueError):
            InstanceContext(p, (), 0.0)
        with pytest.raises(ValueError):
            InstanceContext(p, (Pose((Keypoint(0, 0), Keypoint(1, 1))),), 1.0)


class TestAnchorSet:
    def _ctx(self, spec, neighbor_vis=2):
        xy = np.arange(34, dtype=float).reshape(17, 2)
        t = Pose.from_arrays(xy, 2)
        n = Pose.from_arrays(xy + 100, neighbor_vis)
        return InstanceContext(t, (n,), 10.0)

    def test_order(self, spec):
        a = anchor_set(self._ctx(spec), spec, 5)
        assert [x.tag for x in a] == [(0, JointRole.SAME), (0, JointRole.FLIPPED), (1, JointRole.SAME), (1, JointRole.FLIPPED)]
        assert a[1].joint == 6 and a[3].joint == 6
        assert a[2].xy == (110.0, 111.0)

    def test_nose_has_no_partner(self, spec):
        a = anchor_set(self._ctx(spec), spec, 0)
        assert [x.tag for x in a] == [(0, JointRole.SAME), (1, JointRole.SAME)]

    def test_unlabeled_anchors_dropped(self, spec):
        a = anchor_set(self._ctx(spec, neighbor_vis=0), spec, 5)
        assert all(x.is_target for x in a)

    def test_anchor_tag(self):
        a = Anchor(2, JointRole.FLIPPED, 6, (0.0, 0.0))
        assert not a.is_target and a.tag == (2, JointRole.FLIPPED)


class TestPoseBoxIou:
    def test_values(self):
        a = Pose.from_arrays([[0, 0], [10, 10]], 2)
        b = Pose.from_arrays([[5, 0], [15, 10]], 2)
        # overlap 5x10 = 50, union 100 + 100 - 50
        assert pose_bbox_iou(a, b) == pytest.approx(50 / 150)
        assert pose_bbox_iou(a, a) == 1.0
        assert pose_bbox_iou(a, Pose.from_arrays([[20, 20], [30, 30]], 2)) == 0.0
        assert pose_bbox_iou(a, Pose.from_arrays([[0, 0], [1, 1]], 0)) == 0.0
