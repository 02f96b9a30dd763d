"""A naive reference compositor and the finite-difference gradient suite.

The reference compositor projects and blends one pixel at a time with plain
loops. It shares only the rotation helper with the production renderer.
"""

import json
from collections.abc import Callable

import numpy as np

from .camera import CameraParams, CameraTensors, quat_to_rotmat, sample_bilinear
from .constants import (
    ALPHA_MAX,
    COV2D_REG,
    CULL_SIGMAS,
    Z_MIN,
)
from .models import GradCheckRecord, RunConfig
from .network import init_params
from .objectives import loss_point, loss_pose, loss_recalib, loss_rgb, loss_sem
from .optim import grad_check
from .rasterizer import RasterOptions, rasterize
from .scene import OracleTeachers, gen_scene, make_teachers
from .tensor import Tensor, parameter
from .training import compute_losses

SMOOTH_TOLERANCE = 1e-4
TOLERANCE = 1e-3


def _splat(cam: CameraParams, center: np.ndarray, r: np.ndarray, s: np.ndarray) -> tuple[float, float, float, np.ndarray] | None:
    """Screen mean, depth and 2D covariance of one Gaussian, or None when culled."""
    rc = cam.rotation
    x, y, z = rc @ center + cam.t
    if z <= Z_MIN:
        return None
    fx, fy = cam.f
    jac = np.array([[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]])
    rot = quat_to_rotmat(r)
    world = rot @ np.diag(s * s) @ rot.T
    cov = jac @ rc @ world @ rc.T @ jac.T + COV2D_REG * np.eye(2)
    u = fx * x / z + cam.cx
    v = fy * y / z + cam.cy
    reach = CULL_SIGMAS * np.sqrt(np.max(np.linalg.eigvalsh(cov)))
    if u + reach < -0.5 or u - reach > cam.width - 0.5 or v + reach < -0.5 or v - reach > cam.height - 0.5:
        return None
    return u, v, z, cov


def reference_composite(
    cam: CameraParams,
    center: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    sigma: np.ndarray,
    payload: np.ndarray,
    *,
    falloff: bool = True,
) -> np.ndarray:
    """(H, W, C + 2): blended payload, depth and alpha, one pixel at a time.

    Every kept splat is evaluated at every pixel: no support cutoff and no
    early exit.
    """
    n = center.shape[0]
    payload = np.asarray(payload, dtype=np.float64).reshape(n, -1)
    splats = []
    for i in range(n):
        sp = _splat(cam, center[i], r[i], s[i])
        if sp is not None:
            u, v, z, cov = sp
            splats.append((z, i, u, v, np.linalg.inv(cov)))
    splats.sort(key=lambda item: (item[0], item[1]))

    channels = payload.shape[1]
    out = np.zeros((cam.height, cam.width, channels + 2))
    for py in range(cam.height):
        for px in range(cam.width):
            trans = 1.0
            for z, i, u, v, conic in splats:
                d = np.array([px - u, py - v])
                maha = float(d @ conic @ d)
                weight_2d = np.exp(-0.5 * maha) if falloff else 1.0
                alpha = min(float(sigma[i]) * weight_2d, ALPHA_MAX)
                weight = alpha * trans
                out[py, px, :channels] += weight * payload[i]
                out[py, px, channels] += weight * z
                out[py, px, channels + 1] += weight
                trans *= 1.0 - alpha
    return out


def random_splat_scene(
    rng: np.random.Generator, n: int, channels: int = 3
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gaussians scattered in front of an identity camera."""
    center = np.column_stack(
        [rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(1.5, 3.5, n)]
    )
    r = rng.normal(size=(n, 4))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    s = rng.uniform(0.02, 0.25, (n, 3))
    sigma = rng.uniform(0.05, 1.0, n)
    payload = rng.uniform(0.0, 1.0, (n, channels))
    return center, r, s, sigma, payload


def compare_with_reference(
    seed: int,
    n: int = 20,
    width: int = 16,
    height: int = 12,
    options: RasterOptions | None = None,
) -> tuple[float, float]:
    """Max per-pixel difference against the dense, no-early-exit reference
    and the max blend weight sum of the production render."""
    options = options or RasterOptions()
    rng = np.random.default_rng(seed)
    cam = CameraParams.identity(float(width), width, height)
    center, r, s, sigma, payload = random_splat_scene(rng, n)
    packed, _ = rasterize(
        Tensor(center), Tensor(r), Tensor(s), Tensor(sigma), Tensor(payload),
        Tensor(cam.q), Tensor(cam.t), Tensor(cam.f), width, height, options,
    )
    ref = reference_composite(cam, center, r, s, sigma, payload, falloff=options.falloff)
    return float(np.max(np.abs(packed.data - ref))), float(np.max(packed.data[:, :, -1]))


# gradient checks


def _weights(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.normal(size=shape)


def check_bilinear(seed: int = 0) -> GradCheckRecord:
    rng = np.random.default_rng(seed)
    img = parameter(rng.uniform(size=(5, 6, 2)), "img")
    uv = parameter(
        np.column_stack([rng.uniform(0.2, 4.8, 8), rng.uniform(0.2, 3.8, 8)]) + 0.01, "uv"
    )
    w = _weights(rng, (8, 2))
    return grad_check(
        lambda: (sample_bilinear(img, uv) * w).sum(),
        {"img": img, "uv": uv},
        check="bilinear",
        tolerance=SMOOTH_TOLERANCE,
    )


def check_rasterizer(seed: int = 0) -> GradCheckRecord:
    rng = np.random.default_rng(seed)
    width, height, n = 9, 7, 3
    center, r, s, sigma, payload = random_splat_scene(rng, n)
    center[:, :2] *= 0.3
    s = np.clip(s, 0.08, None)
    sigma = np.clip(sigma, 0.1, 0.9)
    params = {
        "center": parameter(center, "center"),
        "r": parameter(r, "r"),
        "s": parameter(s, "s"),
        "sigma": parameter(sigma, "sigma"),
        "payload": parameter(payload, "payload"),
        "q": parameter(np.array([0.99, 0.05, -0.04, 0.02]), "q"),
        "t": parameter(np.array([0.02, -0.03, 0.1]), "t"),
        "f": parameter(np.array([8.0, 8.5]), "f"),
    }
    w = _weights(rng, (height, width, 3 + 2))
    options = RasterOptions(support_sigmas=None)

    def f() -> Tensor:
        p = params
        packed, _ = rasterize(
            p["center"], p["r"], p["s"], p["sigma"], p["payload"],
            p["q"], p["t"], p["f"], width, height, options,
        )
        return (packed * w).sum()

    return grad_check(f, params, check="rasterizer", tolerance=TOLERANCE)


def _loss_inputs(rng: np.random.Generator) -> dict[str, Tensor]:
    views, h, w = 2, 12, 12
    return {
        "rgb": parameter(rng.uniform(0.1, 0.9, (views, h, w, 3)), "rgb"),
        "sem": parameter(rng.normal(size=(views, h, w, 4)), "sem"),
        "points": parameter(
            np.concatenate(
                [rng.uniform(-0.3, 0.3, (views, h, w, 2)), rng.uniform(2.0, 3.0, (views, h, w, 1))],
                axis=-1,
            ),
            "points",
        ),
        "conf": parameter(rng.uniform(1.0, 2.0, (views, h, w)), "conf"),
        "q": parameter(np.array([[1.0, 0.02, -0.01, 0.03], [0.98, 0.1, 0.05, -0.02]]), "q"),
        "t": parameter(np.array([[0.01, 0.0, -0.02], [0.3, -0.05, 0.04]]), "t"),
        "f": parameter(np.array([[10.0, 10.5], [9.5, 10.0]]), "f"),
    }


def check_losses(seed: int = 0) -> list[GradCheckRecord]:
    rng = np.random.default_rng(seed)
    x = _loss_inputs(rng)
    views, h, w = x["rgb"].shape[:3]
    target = rng.uniform(0.0, 1.0, (views, h, w, 3))
    teacher_sem = rng.normal(size=(views, h, w, 4))
    teacher_points = x["points"].data + rng.normal(0.0, 0.1, x["points"].shape)
    teacher_conf = rng.uniform(1.0, 2.0, (views, h, w))
    teacher_cams = [
        CameraParams(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.array([10.0, 10.0]), w, h),
        CameraParams(np.array([0.99, 0.12, 0.0, 0.0]), np.array([0.25, 0.0, 0.0]), np.array([10.0, 10.0]), w, h),
    ]

    def cams() -> CameraTensors:
        return CameraTensors(x["q"], x["t"], x["f"], w, h)

    def pick(*names: str) -> dict[str, Tensor]:
        return {n: x[n] for n in names}

    cases: list[tuple[str, Callable[[], Tensor], dict[str, Tensor], float]] = [
        ("loss_rgb", lambda: loss_rgb(x["rgb"], target), pick("rgb"), TOLERANCE),
        ("loss_sem", lambda: loss_sem(x["sem"], teacher_sem), pick("sem"), SMOOTH_TOLERANCE),
        ("loss_pose", lambda: loss_pose(cams(), teacher_cams), pick("q", "t", "f"), TOLERANCE),
        (
            "loss_point",
            lambda: loss_point(x["points"], x["conf"], teacher_points, teacher_conf),
            pick("points", "conf"),
            TOLERANCE,
        ),
        (
            "loss_recalib_geo",
            lambda: loss_recalib(x["rgb"], x["sem"], x["points"], cams())[0],
            pick("rgb", "points", "q", "t", "f"),
            TOLERANCE,
        ),
        (
            "loss_recalib_sem",
            lambda: loss_recalib(x["rgb"], x["sem"], x["points"], cams())[1],
            pick("sem", "points", "q", "t", "f"),
            TOLERANCE,
        ),
    ]
    return [
        grad_check(f, params, check=name, tolerance=tol, max_coords=24, seed=seed)
        for name, f, params, tol in cases
    ]


def micro_config() -> RunConfig:
    return RunConfig(
        views=2,
        heldout_views=0,
        width=16,
        height=16,
        classes=2,
        primitives=2,
        patch_size=8,
        dim=16,
        heads=2,
        enc_depth=1,
        dec_depth=1,
        n_gauss=2,
        init_std=0.1,
    )


def check_network(seed: int = 0, cfg: RunConfig | None = None) -> GradCheckRecord:
    cfg = cfg or micro_config()
    scene = gen_scene(cfg)
    teachers: OracleTeachers = make_teachers(scene)
    params = init_params(cfg)
    images = scene.images[scene.source]
    options = RasterOptions(support_sigmas=None)
    masks = compute_losses(params, images, teachers, step=1, options=options).out.masks

    def f() -> Tensor:
        return compute_losses(params, images, teachers, step=1, masks=masks, options=options).loss

    return grad_check(
        f, params.tensors, check="network", tolerance=TOLERANCE, max_coords=2, seed=seed
    )


def run_suite(seed: int = 0) -> list[GradCheckRecord]:
    records = [check_bilinear(seed), check_rasterizer(seed), *check_losses(seed), check_network(seed)]
    for rec in records:
        print(json.dumps({"status": "gradcheck", "check": rec.check, "passed": rec.passed}), flush=True)
    return records
