import numpy as np
import pytest

from unisplat.camera import CameraParams, quat_multiply
from unisplat.errors import ShapeError
from unisplat.metrics import (
    decode_semantics,
    depth_scores,
    pairwise_rotation_errors,
    pose_auc,
    pose_aucs,
    psnr,
    segmentation_scores,
    ssim_score,
)


def test_psnr_of_known_mse():
    target = np.zeros((4, 4, 3))
    assert psnr(target + 0.1, target) == pytest.approx(20.0)


def test_psnr_is_capped():
    img = np.full((4, 4, 3), 0.3)
    assert psnr(img, img) == 99.0


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_ssim_score_of_identical_images(rng):
    img = rng.uniform(size=(12, 12, 3))
    assert ssim_score(img, img) == pytest.approx(1.0)


def test_decode_semantics_picks_nearest_code():
    codes = np.eye(3, 64)
    feats = np.zeros((2, 2, 64))
    feats[0, 0, 0] = 5.0
    feats[0, 1, 1] = 0.1
    feats[1, 0, :3] = [0.1, 0.2, 0.9]
    feats[1, 1, :3] = [0.0, -1.0, 0.0]
    assert decode_semantics(feats, codes).tolist() == [[0, 1], [2, 0]]


SEGMENTATION = [
    ([0, 0, 1, 1], [0, 0, 1, 1], 1.0, 1.0),
    ([0, 0, 1, 1], [0, 1, 1, 1], (0.5 + 2.0 / 3.0) / 2.0, 0.75),
    ([2, 2, 2, 2], [0, 0, 0, 0], 0.0, 0.0),
]


@pytest.mark.parametrize("pred,target,miou,acc", SEGMENTATION)
def test_segmentation_scores(pred, target, miou, acc):
    got_miou, got_acc = segmentation_scores(np.array(pred), np.array(target))
    assert got_miou == pytest.approx(miou)
    assert got_acc == pytest.approx(acc)


def test_depth_scores_normalize_by_alpha():
    gt = np.full((3, 3), 2.0)
    alpha = np.full((3, 3), 0.8)
    abs_rel, tau = depth_scores(gt * alpha, alpha, gt)
    assert abs_rel == pytest.approx(0.0)
    assert tau == 1.0


def test_depth_scores_double_depth():
    gt = np.full((2, 2), 1.5)
    alpha = np.ones((2, 2))
    abs_rel, tau = depth_scores(2.0 * gt, alpha, gt)
    assert abs_rel == pytest.approx(1.0)
    assert tau == 0.0


def test_depth_scores_skip_uncovered_pixels():
    gt = np.array([[1.0, 1.0]])
    assert depth_scores(np.array([[1.0, 0.0]]), np.array([[1.0, 0.1]]), gt) == pytest.approx((0.0, 1.0))
    assert depth_scores(np.zeros((1, 2)), np.full((1, 2), 0.2), gt) is None


AUCS = [
    ([0.0, 0.0], 5, 1.0),
    ([0.5, 30.0], 5, 0.5),
    ([2.5], 5, 0.6),
    ([45.0], 20, 0.0),
    ([], 10, 0.0),
]


@pytest.mark.parametrize("errors,threshold,auc", AUCS)
def test_pose_auc(errors, threshold, auc):
    assert pose_auc(np.array(errors), threshold) == pytest.approx(auc)


def test_pose_aucs_thresholds():
    assert set(pose_aucs(np.zeros(3))) == {5, 10, 20}


def cams_from(quats, ts):
    return [
        CameraParams(np.asarray(q, dtype=np.float64), np.asarray(t, dtype=np.float64), np.array([10.0, 10.0]), 8, 8)
        for q, t in zip(quats, ts, strict=True)
    ]


def test_pairwise_errors_ignore_global_rotation(rng):
    quats = [q / np.linalg.norm(q) for q in rng.normal(size=(3, 4))]
    ts = rng.normal(size=(3, 3))
    g = np.array([np.cos(0.4), 0.0, np.sin(0.4), 0.0])
    target = cams_from(quats, ts)
    pred = cams_from([quat_multiply(q, g) for q in quats], ts)
    errs = pairwise_rotation_errors(pred, target)
    assert errs.shape == (3,)
    assert np.allclose(errs, 0.0, atol=1e-5)


def test_pairwise_errors_detect_relative_rotation():
    ident = (1.0, 0.0, 0.0, 0.0)
    qz90 = (np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))
    target = cams_from([ident, ident], [(0, 0, 0), (0, 0, 0)])
    pred = cams_from([ident, qz90], [(0, 0, 0), (0, 0, 0)])
    assert pairwise_rotation_errors(pred, target).tolist() == pytest.approx([90.0])


def test_pairwise_errors_count_mismatch():
    cams = cams_from([(1.0, 0.0, 0.0, 0.0)], [(0, 0, 0)])
    with pytest.raises(ShapeError):
        pairwise_rotation_errors(cams, cams * 2)
