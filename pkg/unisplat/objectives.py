"""Loss terms and their weighted total.

Every term takes tape tensors for predictions and plain arrays (or constant
tensors) for targets. ``reduction="sum"`` gives the raw per-pixel sums;
``"mean"`` divides the pixel sums by H*W*V, which is what training optimizes.
"""

import json
import math
import sys
from collections.abc import Sequence
from functools import lru_cache
from typing import Literal

import numpy as np

from .camera import CameraParams, CameraTensors, project_points_t, sample_bilinear
from .constants import (
    COS_EPS,
    HUBER_DELTA,
    LAMBDA_POINT,
    LAMBDA_POSE,
    LAMBDA_SSIM,
    REPROJ_TOLERANCE_PX,
    SSIM_C1,
    SSIM_C2,
    SSIM_SIGMA,
    SSIM_WINDOW,
)
from .errors import NonFiniteLoss, ShapeError
from .models import LossReport
from .tensor import Grads, Tensor, as_tensor, concat, custom, huber, normalize, tabs, vector_norm

Reduction = Literal["sum", "mean"]


@lru_cache(maxsize=16)
def _blur_matrix(n: int) -> np.ndarray:
    """Same-size Gaussian filtering along one axis, zero padded."""
    half = SSIM_WINDOW // 2
    taps = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2.0 * SSIM_SIGMA**2))
    taps /= taps.sum()
    out = np.zeros((n, n))
    for i in range(n):
        for k, w in enumerate(taps):
            j = i + k - half
            if 0 <= j < n:
                out[i, j] = w
    return out


def gaussian_blur(x: Tensor) -> Tensor:
    """Separable SSIM window over an (H, W, C) tensor."""
    x = as_tensor(x)
    gh, gw = _blur_matrix(x.shape[0]), _blur_matrix(x.shape[1])
    out = np.einsum("ij,jkc,lk->ilc", gh, x.data, gw)

    def backward(g: np.ndarray) -> Grads:
        return (np.einsum("ij,ilc,lk->jkc", gh, g, gw),)

    return custom(out, (x,), backward)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Mean SSIM of two (H, W, C) images in [0, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    mu_a, mu_b = gaussian_blur(a), gaussian_blur(b)
    var_a = gaussian_blur(a * a) - mu_a * mu_a
    var_b = gaussian_blur(b * b) - mu_b * mu_b
    cov = gaussian_blur(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def _check_dims(pred: Tensor, target: Tensor, term: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{term}: prediction {pred.shape} vs target {target.shape}")


def _pixels(x: Tensor) -> int:
    return int(np.prod(x.shape[:3]))


def loss_rgb(rendered: Tensor, target: np.ndarray, lambda_ssim: float = LAMBDA_SSIM) -> Tensor:
    """Sum over views of mean L1 plus ``lambda_ssim * (1 - SSIM)``.

    (1 - SSIM) stands in for a learned perceptual term.
    """
    rendered, target_t = as_tensor(rendered), as_tensor(target)
    _check_dims(rendered, target_t, "rgb")
    total = tabs(rendered - target_t).mean(axis=(1, 2, 3)).sum()
    if lambda_ssim:
        for v in range(rendered.shape[0]):
            total = total + (1.0 - ssim(rendered[v], target_t[v])) * lambda_ssim
    return total


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel ``1 - cos(a, b)`` over the last axis; a zero vector scores 1."""
    return 1.0 - (normalize(a, axis=-1, eps=COS_EPS) * normalize(b, axis=-1, eps=COS_EPS)).sum(axis=-1)


def loss_sem(rendered: Tensor, teacher: np.ndarray, reduction: Reduction = "sum") -> Tensor:
    rendered, teacher_t = as_tensor(rendered), as_tensor(teacher)
    _check_dims(rendered, teacher_t, "sem")
    total = cosine_distance(rendered, teacher_t).sum()
    return total * (1.0 / _pixels(rendered)) if reduction == "mean" else total


def _aligned_quaternions(pred: Tensor, teacher: np.ndarray) -> Tensor:
    sign = np.where(np.sum(pred.data * teacher, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    return pred * sign


def loss_pose(pred: CameraTensors, teacher: Sequence[CameraParams], delta: float = HUBER_DELTA) -> Tensor:
    """Element-wise Huber on the 9-vectors, summed over views.

    The predicted quaternion is sign-aligned with the teacher's first.
    """
    target = np.stack([c.vector() for c in teacher])
    q = _aligned_quaternions(pred.q, target[:, 0:4])
    vec = concat([q, pred.t, pred.f], axis=1)
    _check_dims(vec, Tensor(target), "pose")
    return huber(vec - target, delta).sum()


def loss_point(
    points: Tensor,
    conf: Tensor,
    teacher_points: np.ndarray,
    teacher_conf: np.ndarray,
    reduction: Reduction = "sum",
) -> Tensor:
    _check_dims(points, as_tensor(teacher_points), "point")
    _check_dims(conf, as_tensor(teacher_conf), "point confidence")
    dist = vector_norm(points - teacher_points, axis=-1)
    total = (dist * teacher_conf).sum() + tabs(conf - teacher_conf).sum()
    return total * (1.0 / _pixels(points)) if reduction == "mean" else total


def loss_geo(
    pred_cams: CameraTensors,
    teacher_cams: Sequence[CameraParams],
    points: Tensor,
    conf: Tensor,
    teacher_points: np.ndarray,
    teacher_conf: np.ndarray,
    reduction: Reduction = "sum",
) -> tuple[Tensor, Tensor]:
    return (
        loss_pose(pred_cams, teacher_cams),
        loss_point(points, conf, teacher_points, teacher_conf, reduction),
    )


def reprojection_valid(uv: np.ndarray, valid: np.ndarray, width: int, height: int) -> np.ndarray:
    tol = REPROJ_TOLERANCE_PX
    return (
        valid
        & (uv[:, 0] >= -tol)
        & (uv[:, 0] <= width - 1 + tol)
        & (uv[:, 1] >= -tol)
        & (uv[:, 1] <= height - 1 + tol)
    )


def loss_recalib(
    rgb: Tensor,
    sem: Tensor,
    points: Tensor,
    cams: CameraTensors,
    reduction: Reduction = "sum",
) -> tuple[Tensor, Tensor]:
    """Reproject every pixel's point through its own view's camera.

    The rendered RGB and semantics are sampled at the reprojected location and
    compared against the render at the source pixel. Invalid reprojections are
    dropped and the view's sum is rescaled by H*W / valid count.
    """
    rgb, sem, points = as_tensor(rgb), as_tensor(sem), as_tensor(points)
    views, height, width = rgb.shape[0], rgb.shape[1], rgb.shape[2]
    hw = height * width
    geo_total: Tensor = Tensor(0.0)
    sem_total: Tensor = Tensor(0.0)
    for v in range(views):
        q, t, f = cams.view(v)
        uv, front, _ = project_points_t(q, t, f, points[v].reshape(hw, 3), width, height)
        ok = np.flatnonzero(reprojection_valid(uv.data, front, width, height))
        if ok.size == 0:
            print(
                json.dumps({"status": "warning", "message": "no valid reprojection", "view": v}),
                file=sys.stderr,
                flush=True,
            )
            continue
        scale = hw / ok.size
        uv_ok = uv[ok]
        rgb_flat = rgb[v].reshape(hw, 3)
        sem_flat = sem[v].reshape(hw, sem.shape[3])
        warped = sample_bilinear(rgb[v], uv_ok)
        geo_total = geo_total + tabs(rgb_flat[ok] - warped).sum() * scale
        warped_sem = sample_bilinear(sem[v], uv_ok)
        sem_total = sem_total + cosine_distance(warped_sem, sem_flat[ok]).sum() * scale
    if reduction == "mean":
        norm = 1.0 / (hw * views)
        return geo_total * norm, sem_total * norm
    return geo_total, sem_total


def total_loss(
    rgb: float,
    sem: float,
    pose: float,
    point: float,
    recalib_geo: float,
    recalib_sem: float,
    lambda_pose: float = LAMBDA_POSE,
    lambda_point: float = LAMBDA_POINT,
    step: int | None = None,
) -> LossReport:
    parts = {
        "rgb": rgb,
        "sem": sem,
        "pose": pose,
        "point": point,
        "recalib_geo": recalib_geo,
        "recalib_sem": recalib_sem,
    }
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(name, step)
    total = rgb + sem + (lambda_pose * pose + lambda_point * point) + (recalib_geo + recalib_sem)
    return LossReport(
        **{k: max(v, 0.0) for k, v in parts.items()},
        total=max(total, 0.0),
        lambda_pose=lambda_pose,
        lambda_point=lambda_point,
    )


def weighted_total(
    terms: dict[str, Tensor], lambda_pose: float = LAMBDA_POSE, lambda_point: float = LAMBDA_POINT
) -> Tensor:
    """Tape twin of ``total_loss`` with the same weighting and grouping."""
    return (
        terms["rgb"]
        + terms["sem"]
        + (terms["pose"] * lambda_pose + terms["point"] * lambda_point)
        + (terms["recalib_geo"] + terms["recalib_sem"])
    )
