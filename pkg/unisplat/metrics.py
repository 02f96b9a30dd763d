"""Novel-view, depth, segmentation and pose metrics."""

from collections.abc import Sequence

import numpy as np

from .camera import CameraParams, relative_pose, relative_rotation_error
from .constants import COS_EPS, DEPTH_VALID_ALPHA, POSE_AUC_THRESHOLDS, PSNR_CAP, TAU_THRESHOLD
from .errors import ShapeError
from .objectives import ssim
from .tensor import Tensor


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(np.clip(-10.0 * np.log10(mse), 0.0, PSNR_CAP))


def ssim_score(pred: np.ndarray, target: np.ndarray) -> float:
    return ssim(Tensor(np.asarray(pred, dtype=np.float64)), Tensor(np.asarray(target, dtype=np.float64))).item()


def decode_semantics(features: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Per-pixel class id: argmax of cosine similarity against the class codes."""
    feats = np.asarray(features, dtype=np.float64)
    unit = feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), COS_EPS)
    codes = codes / np.linalg.norm(codes, axis=-1, keepdims=True)
    return np.argmax(unit @ codes.T, axis=-1)


def segmentation_scores(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """mIoU over the classes present in either map, and pixel accuracy."""
    pred, target = np.asarray(pred).reshape(-1), np.asarray(target).reshape(-1)
    pix_acc = float(np.mean(pred == target))
    ious = []
    for c in np.union1d(pred, target):
        inter = np.sum((pred == c) & (target == c))
        union = np.sum((pred == c) | (target == c))
        ious.append(inter / union)
    return float(np.mean(ious)), pix_acc


def depth_scores(
    depth: np.ndarray, alpha: np.ndarray, target: np.ndarray
) -> tuple[float, float] | None:
    """abs-rel and the tau inlier fraction over pixels the render covers.

    The composited depth is normalized by alpha first. ``None`` when no pixel
    is valid.
    """
    depth, alpha, target = (np.asarray(x, dtype=np.float64) for x in (depth, alpha, target))
    valid = (alpha >= DEPTH_VALID_ALPHA) & np.isfinite(target) & (target > 0.0)
    if not np.any(valid):
        return None
    d = depth[valid] / alpha[valid]
    gt = target[valid]
    abs_rel = float(np.mean(np.abs(d - gt) / gt))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(d / gt, gt / np.where(d > 0.0, d, np.nan))
    tau = float(np.mean(np.nan_to_num(ratio, nan=np.inf) < TAU_THRESHOLD))
    return abs_rel, tau


def pairwise_rotation_errors(pred: Sequence[CameraParams], target: Sequence[CameraParams]) -> np.ndarray:
    """Relative-rotation error in degrees for every camera pair i < j."""
    if len(pred) != len(target):
        raise ShapeError(f"{len(pred)} predicted cameras for {len(target)} targets")
    errs = []
    for i in range(len(pred)):
        for j in range(i + 1, len(pred)):
            errs.append(
                relative_rotation_error(relative_pose(pred[i], pred[j]), relative_pose(target[i], target[j]))
            )
    return np.asarray(errs)


def pose_auc(errors_deg: np.ndarray, threshold: int) -> float:
    """Area under the accuracy curve up to ``threshold`` degrees, 1-degree bins."""
    errors_deg = np.asarray(errors_deg, dtype=np.float64)
    if errors_deg.size == 0:
        return 0.0
    hist, _ = np.histogram(errors_deg, bins=np.arange(threshold + 1))
    return float(np.mean(np.cumsum(hist / errors_deg.size)))


def pose_aucs(
    errors_deg: np.ndarray, thresholds: tuple[int, ...] = POSE_AUC_THRESHOLDS
) -> dict[int, float]:
    return {th: pose_auc(errors_deg, th) for th in thresholds}
