"""Synthetic multi-view scenes and the oracle teachers built from them.

Images come from an analytic ray caster over spheres and axis-aligned boxes
inside a large background sphere. It shares no code with the Gaussian
rasterizer. Camera rays are scaled to unit camera-z, so a hit parameter is
directly the camera-frame depth.
"""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraParams, backproject_depth, quat_multiply, rotmat_to_quat
from .constants import SEM_DIM
from .errors import SceneError
from .models import RunConfig

PrimitiveKind = Literal["sphere", "box"]

BACKGROUND_RADIUS = 8.0
CHECKER_SIZE = 0.25
ELEVATION_DEG = 15.0


@dataclass(frozen=True)
class Primitive:
    kind: PrimitiveKind
    center: tuple[float, float, float]
    size: tuple[float, ...]
    color: tuple[float, float, float]
    class_id: int

    @property
    def half_extent(self) -> np.ndarray:
        if self.kind == "sphere":
            return np.full(3, self.size[0])
        return np.asarray(self.size, dtype=np.float64)


@dataclass
class SyntheticScene:
    cfg: RunConfig
    cameras: list[CameraParams]
    primitives: list[Primitive]
    images: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def source(self) -> slice:
        return slice(0, self.cfg.views)

    @property
    def heldout(self) -> slice:
        return slice(self.cfg.views, len(self.cameras))

    @property
    def background_id(self) -> int:
        return self.cfg.classes


@dataclass
class OracleTeachers:
    cameras: list[CameraParams]
    points: np.ndarray
    confidence: np.ndarray
    features: np.ndarray
    class_codes: np.ndarray = field(repr=False)


def _check_config(cfg: RunConfig) -> None:
    problems = []
    if cfg.views < 2:
        problems.append(f"views must be >= 2, got {cfg.views}")
    if cfg.classes < 2:
        problems.append(f"classes must be >= 2, got {cfg.classes}")
    if cfg.classes + 1 > SEM_DIM:
        problems.append(f"classes + background must fit {SEM_DIM} codes, got {cfg.classes}")
    if problems:
        raise SceneError("; ".join(problems))


def _random_primitives(cfg: RunConfig, rng: np.random.Generator) -> list[Primitive]:
    raw = []
    for i in range(cfg.primitives):
        kind: PrimitiveKind = "sphere" if rng.random() < 0.5 else "box"
        center = rng.uniform(-0.6, 0.6, 3)
        size = rng.uniform(0.2, 0.4, 1) if kind == "sphere" else rng.uniform(0.15, 0.35, 3)
        color = rng.uniform(0.2, 0.9, 3)
        raw.append((kind, center, size, color, i % cfg.classes))

    # fit the cluster's bounding box into [-1, 1]^3
    lo = np.min([c - (np.full(3, s[0]) if k == "sphere" else s) for k, c, s, _, _ in raw], axis=0)
    hi = np.max([c + (np.full(3, s[0]) if k == "sphere" else s) for k, c, s, _, _ in raw], axis=0)
    mid = 0.5 * (lo + hi)
    scale = 1.0 / max(float(np.max(0.5 * (hi - lo))), 1e-9)
    return [
        Primitive(
            kind,
            tuple(float(x) for x in (c - mid) * scale),
            tuple(float(x) for x in s * scale),
            tuple(float(x) for x in col),
            int(cls),
        )
        for kind, c, s, col, cls in raw
    ]


def look_at(position: np.ndarray, target: np.ndarray, focal: float, width: int, height: int) -> CameraParams:
    """OpenCV-convention camera (x right, y down, z forward) at ``position``."""
    forward = target - position
    forward /= np.linalg.norm(forward)
    right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return CameraParams(rotmat_to_quat(rot), -rot @ position, np.array([focal, focal]), width, height)


def arc_cameras(cfg: RunConfig, rng: np.random.Generator) -> list[CameraParams]:
    """Source cameras spread over the arc, then held-out ones between them."""
    half = np.radians(cfg.arc_deg) / 2.0
    source = np.linspace(-half, half, cfg.views)
    mids = 0.5 * (source[:-1] + source[1:])
    heldout = [mids[k % mids.size] for k in range(cfg.heldout_views)]
    elev = np.radians(ELEVATION_DEG)
    cams = []
    for theta in [*source, *heldout]:
        pos = cfg.camera_distance * np.array(
            [np.cos(elev) * np.sin(theta), -np.sin(elev), -np.cos(elev) * np.cos(theta)]
        )
        pos = pos + cfg.camera_jitter * rng.normal(size=3)
        cams.append(look_at(pos, np.zeros(3), cfg.prior_focal, cfg.width, cfg.height))
    return cams


def _camera_rays(cam: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and (H*W, 3) world directions with unit camera z."""
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = np.stack(
        [(uu - cam.cx) / cam.f[0], (vv - cam.cy) / cam.f[1], np.ones(uu.shape)], axis=-1
    ).reshape(-1, 3)
    return cam.center, d_cam @ cam.rotation


def _hit_sphere(o: np.ndarray, d: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    oc = o - center
    a = np.sum(d * d, axis=1)
    b = 2.0 * d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = (-b - root) / (2.0 * a)
    far = (-b + root) / (2.0 * a)
    hit = np.where(near > 0.0, near, far)
    return np.where((disc >= 0.0) & (hit > 0.0), hit, np.inf)


def _hit_box(o: np.ndarray, d: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (center - half - o) / safe
    t2 = (center + half - o) / safe
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    hit = np.where(tmin > 0.0, tmin, tmax)
    return np.where((tmax >= np.maximum(tmin, 0.0)) & (hit > 0.0), hit, np.inf)


def _checker(points: np.ndarray) -> np.ndarray:
    cells = np.floor(points / CHECKER_SIZE).astype(np.int64).sum(axis=1)
    return np.where(cells % 2 == 0, 1.0, 0.7)


def ray_cast(
    cam: CameraParams, primitives: list[Primitive], background_id: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact RGB, camera-z depth and class id per pixel."""
    o, d = _camera_rays(cam)
    n = d.shape[0]
    depth = _hit_sphere(o, d, np.zeros(3), BACKGROUND_RADIUS)
    label = np.full(n, background_id, dtype=np.int64)
    owner = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        center = np.asarray(prim.center)
        if prim.kind == "sphere":
            t = _hit_sphere(o, d, center, prim.size[0])
        else:
            t = _hit_box(o, d, center, prim.half_extent)
        closer = t < depth
        depth = np.where(closer, t, depth)
        label = np.where(closer, prim.class_id, label)
        owner = np.where(closer, i, owner)

    points = o + d * depth[:, None]
    unit = d / np.linalg.norm(d, axis=1, keepdims=True)
    palette = np.array([p.color for p in primitives] + [(0.0, 0.0, 0.0)])
    base = np.where((owner >= 0)[:, None], palette[owner], np.clip(0.5 + 0.25 * unit, 0.0, 1.0))
    rgb = np.clip(base * _checker(points)[:, None], 0.0, 1.0)
    shape = (cam.height, cam.width)
    return rgb.reshape(*shape, 3), depth.reshape(shape), label.reshape(shape)


def render_views(
    cameras: list[CameraParams], primitives: list[Primitive], background_id: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    views = [ray_cast(cam, primitives, background_id) for cam in cameras]
    return (
        np.stack([v[0] for v in views]),
        np.stack([v[1] for v in views]),
        np.stack([v[2] for v in views]),
    )


def gen_scene(cfg: RunConfig, seed: int | None = None) -> SyntheticScene:
    _check_config(cfg)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    primitives = _random_primitives(cfg, rng)
    cameras = arc_cameras(cfg, rng)
    images, depth, labels = render_views(cameras, primitives, cfg.classes)
    return SyntheticScene(cfg, cameras, primitives, images, depth, labels, seed)


def class_codes(classes: int, seed: int) -> np.ndarray:
    """``classes + 1`` orthonormal 64-dim codes, the last for background."""
    rng = np.random.default_rng([seed, classes])
    q, _ = np.linalg.qr(rng.normal(size=(SEM_DIM, classes + 1)))
    return q.T.copy()


def perturb_camera(
    cam: CameraParams, rng: np.random.Generator, rot_deg: float, trans: float
) -> CameraParams:
    if rot_deg <= 0.0 and trans <= 0.0:
        return cam
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xyzw = Rotation.from_rotvec(np.radians(rot_deg) * axis).as_quat()
    noise = np.array([xyzw[3], xyzw[0], xyzw[1], xyzw[2]])
    q = quat_multiply(noise, cam.q)
    t = cam.t + trans * rng.normal(size=3)
    return CameraParams(q, t, cam.f, cam.width, cam.height)


def make_teachers(
    scene: SyntheticScene, rot_noise_deg: float = 0.0, trans_noise: float = 0.0
) -> OracleTeachers:
    """Teachers for the source views only; held-out views get nothing."""
    rng = np.random.default_rng([scene.seed, 1])
    src = scene.source
    cams = [perturb_camera(c, rng, rot_noise_deg, trans_noise) for c in scene.cameras[src]]
    points = np.stack([backproject_depth(c, d) for c, d in zip(cams, scene.depth[src], strict=True)])
    codes = class_codes(scene.cfg.classes, scene.seed)
    labels = scene.labels[src]
    return OracleTeachers(
        cameras=cams,
        points=points,
        confidence=np.ones(labels.shape),
        features=codes[labels],
        class_codes=codes,
    )
