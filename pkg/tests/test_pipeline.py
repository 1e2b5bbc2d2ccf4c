import json

import numpy as np
import pytest

from posefix.core import Keypoint, Pose, SkeletonSpec, Visibility
from posefix.pipeline import (
    AffineTransform,
    AugmentConfig,
    BBox,
    CocoFormatError,
    apply_to_pose,
    bbox_from_pose,
    coco_ground_truth_dict,
    coco_results_list,
    crop_transform,
    extend_aspect,
    flip_merge,
    inside_crop,
    load_coco_ground_truth,
    mirror_heatmaps,
    parse_coco_ground_truth,
    parse_coco_results,
    result_entry,
    save_coco_ground_truth,
    warp_image,
)

from conftest import coco_gt_dict


def _box(b):
    return (b.x, b.y, b.width, b.height)


class TestBoxes:
    def test_tight_and_margin(self):
        p = Pose.from_arrays([[10, 20], [30, 60], [20, 40]], 2)
        assert _box(bbox_from_pose(p, 0.0)) == (10, 20, 20, 40)
        assert _box(bbox_from_pose(p, 0.25)) == (5, 10, 30, 60)

    def test_ignores_unlabeled(self):
        p = Pose((Keypoint(10, 20), Keypoint(30, 60), Keypoint(500, 500, Visibility.NOT_LABELED)))
        assert _box(bbox_from_pose(p, 0.0)) == (10, 20, 20, 40)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            bbox_from_pose(Pose((Keypoint(1, 1),)), 0.0)
        with pytest.raises(ValueError):
            bbox_from_pose(Pose((Keypoint.unlabeled(),)))

    def test_extend_aspect(self):
        np.testing.assert_allclose(_box(extend_aspect(BBox(0, 0, 100, 100))), (0, -50 / 3, 100, 400 / 3))
        np.testing.assert_allclose(_box(extend_aspect(BBox(0, 0, 30, 100))), (-22.5, 0, 75, 100))
        assert _box(extend_aspect(BBox(0, 0, 75, 100))) == (0, 0, 75, 100)

    def test_bbox_validation(self):
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 5)


class TestTransforms:
    def test_corners_map_to_crop_corners(self):
        t = crop_transform(BBox(10, 20, 48, 64), 48, 64)
        # box edges land on the pixel-center convention's crop edges
        np.testing.assert_allclose(t.apply([[10, 20], [58, 84]]), [[-0.5, -0.5], [47.5, 63.5]], atol=1e-12)

    def test_flip_reverses_x(self):
        b = BBox(10, 20, 48, 64)
        t = crop_transform(b, 48, 64, flip=True)
        np.testing.assert_allclose(t.apply([b.center]), [[23.5, 31.5]], atol=1e-12)
        np.testing.assert_allclose(t.apply([[10, 50], [58, 50]])[:, 0], [47.5, -0.5], atol=1e-12)

    def test_inverse_identity(self):
        rng = np.random.default_rng(0)
        t = crop_transform(BBox(3, -7, 80, 101), 48, 64, scale_aug=1.2, rot_aug_deg=27.0, flip=True)
        pts = rng.uniform(-100, 300, (100, 2))
        np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-6)
        np.testing.assert_allclose(t.compose(t.inverse()).matrix, AffineTransform.identity().matrix, atol=1e-12)

    def test_not_invertible(self):
        with pytest.raises(ValueError):
            AffineTransform(np.zeros((2, 3)))

    def test_inside(self):
        t = AffineTransform.identity((4, 3))
        np.testing.assert_array_equal(t.inside([[-0.5, 0], [3.6, 0], [1, 2.5]]), [True, False, True])

    def test_augment_sample_ranges(self):
        cfg = AugmentConfig()
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = cfg.sample(rng)
            assert 0.7 <= a.scale <= 1.3 and -40 <= a.rotation <= 40


class TestPoseTransforms:
    def test_identity(self, spec):
        p = Pose.from_arrays(np.random.default_rng(0).random((17, 2)) * 40, 2)
        q = apply_to_pose(AffineTransform.identity(), p, spec, False)
        np.testing.assert_array_equal(q.xy, p.xy)

    def test_flip_swaps_slots(self, spec):
        xy = np.zeros((17, 2))
        xy[9] = [10, 20]
        p = Pose.from_arrays(xy, 2)
        q = apply_to_pose(AffineTransform.mirror(64), p, spec, True)
        assert (q.keypoints[10].x, q.keypoints[10].y) == (53, 20)

    def test_double_flip(self, spec):
        p = Pose.from_arrays(np.random.default_rng(0).random((17, 2)) * 40, 2)
        m = AffineTransform.mirror(64)
        q = apply_to_pose(m, apply_to_pose(m, p, spec, True), spec, True)
        np.testing.assert_allclose(q.xy, p.xy, atol=1e-9)

    def test_inside_crop_flags(self, spec):
        t = AffineTransform.identity((10, 10))
        xy = np.full((17, 2), 5.0)
        xy[0] = [20, 5]
        vis = np.full(17, 2)
        vis[1] = 0
        flags = inside_crop(t, Pose.from_arrays(xy, vis))
        assert not flags[0] and not flags[1] and flags[2:].all()


class TestFlipMerge:
    def test_mean_of_unmirrored(self, spec):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 17, 6, 5))
        want = np.empty_like(a)
        for k in range(17):
            want[k] = 0.5 * (a[k] + b[spec.flip_index[k]][:, ::-1])
        np.testing.assert_allclose(flip_merge(a, b, spec), want, atol=1e-9)

    def test_consistent_pair_unchanged(self, spec):
        a = np.random.default_rng(1).normal(size=(17, 6, 5))
        np.testing.assert_allclose(flip_merge(a, mirror_heatmaps(a, spec), spec), a, atol=1e-15)

    def test_symmetric_single_joint(self):
        one = SkeletonSpec(("c",), (), (0.1,))
        m = np.array([[[1.0, 2.0, 1.0], [0.0, 5.0, 0.0]]])
        np.testing.assert_array_equal(flip_merge(m, m, one), m)

    def test_shape_errors(self, spec):
        with pytest.raises(ValueError):
            flip_merge(np.zeros((17, 2, 2)), np.zeros((17, 2, 3)), spec)
        with pytest.raises(ValueError):
            flip_merge(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), spec)


class TestWarp:
    def test_identity_and_shift(self):
        img = np.random.default_rng(0).random((3, 8, 6))
        np.testing.assert_allclose(warp_image(img, AffineTransform.identity(), 6, 8), img)
        shift = AffineTransform(np.array([[1.0, 0, -1], [0, 1, 0]]))
        out = warp_image(img, shift, 6, 8)
        np.testing.assert_allclose(out[:, :, :5], img[:, :, 1:])
        assert not out[:, :, 5].any()

    def test_mirror(self):
        img = np.random.default_rng(0).random((1, 4, 5))
        np.testing.assert_allclose(warp_image(img, AffineTransform.mirror(5), 5, 4), img[:, :, ::-1])


class TestCoco:
    def test_round_trip(self, spec, tmp_path):
        d = coco_gt_dict()
        gt = parse_coco_ground_truth(d, spec)
        save_coco_ground_truth(gt, tmp_path / "g.json")
        back = load_coco_ground_truth(tmp_path / "g.json", spec)
        assert back.instances == gt.instances
        assert coco_ground_truth_dict(back) == coco_ground_truth_dict(gt)

    def test_neighbors_and_scale(self, spec):
        gt = parse_coco_ground_truth(coco_gt_dict(people=3), spec)
        g = gt.instances[0]
        assert len(g.context.neighbors) == 2
        assert g.context.scale_s == pytest.approx(np.sqrt(g.area))

    def test_degenerate(self, spec):
        d = coco_gt_dict(n_images=1, people=1)
        d["annotations"][0]["keypoints"] = [0] * 51
        d["annotations"][0]["num_keypoints"] = 0
        g = parse_coco_ground_truth(d, spec).instances[0]
        assert g.degenerate and not g.usable

    def test_length_error_names_annotation(self, spec):
        d = coco_gt_dict(n_images=1, people=1)
        d["annotations"][0]["keypoints"] = [0] * 50
        with pytest.raises(CocoFormatError, match="annotation id 1"):
            parse_coco_ground_truth(d, spec)

    @pytest.mark.parametrize("field", ["images", "annotations"])
    def test_missing_top_level(self, spec, field):
        d = coco_gt_dict(n_images=1, people=1)
        del d[field]
        with pytest.raises(CocoFormatError, match=field):
            parse_coco_ground_truth(d, spec)

    def test_bad_visibility(self, spec):
        d = coco_gt_dict(n_images=1, people=1)
        d["annotations"][0]["keypoints"][2] = 3
        with pytest.raises(CocoFormatError):
            parse_coco_ground_truth(d, spec)

    def test_results_zero_triplet_is_unlabeled(self, spec):
        pose = Pose.from_arrays(np.arange(34, dtype=float).reshape(17, 2) + 1, 2)
        e = result_entry(4, pose, score=0.5)
        e["keypoints"][0:3] = [0, 0, 0]
        dets = parse_coco_results([e], spec)
        p = dets[4][0].pose
        assert not p.keypoints[0].labeled and p.keypoints[1].labeled
        assert dets[4][0].score == 0.5
        assert json.loads(json.dumps(coco_results_list(dets))) == [e]

    def test_results_errors(self, spec):
        with pytest.raises(CocoFormatError):
            parse_coco_results({"a": 1}, spec)
        with pytest.raises(CocoFormatError, match="score"):
            parse_coco_results([{"image_id": 1, "keypoints": [0] * 51}], spec)
