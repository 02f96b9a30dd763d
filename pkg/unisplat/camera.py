"""Pinhole cameras with a 9-scalar encoding: quaternion, translation, focals.

Quaternions are (w, x, y, z) and rotate world into camera coordinates. The
principal point is pinned to the image center, ((W-1)/2, (H-1)/2), with pixel
coordinates measured from the center of the top-left pixel.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .constants import Z_MIN
from .errors import InvalidCamera
from .tensor import Grads, Tensor, as_tensor, concat, custom, unbroadcast, where


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions, assumed unit norm."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def rotmat_grad_to_quat(q: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto ``q``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = g_rot
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2.0 * (
        y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12 + z * g20 + w * g21
        - 2.0 * x * g22
    )
    dy = 2.0 * (
        -2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21
        - 2.0 * y * g22
    )
    dz = 2.0 * (
        -2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11 + y * g12
        + x * g20 + y * g21
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(rot).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0.0, -q, q)


def _left_matrix(a: np.ndarray) -> np.ndarray:
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=-1),
            np.stack([x, w, -z, y], axis=-1),
            np.stack([y, z, w, -x], axis=-1),
            np.stack([z, -y, x, w], axis=-1),
        ],
        axis=-2,
    )


def _right_matrix(b: np.ndarray) -> np.ndarray:
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=-1),
            np.stack([x, w, z, -y], axis=-1),
            np.stack([y, -z, w, x], axis=-1),
            np.stack([z, y, -x, w], axis=-1),
        ],
        axis=-2,
    )


def quat_to_rotmat_t(q: Tensor) -> Tensor:
    return custom(
        quat_to_rotmat(q.data), (q,), lambda g: (rotmat_grad_to_quat(q.data, g),)
    )


def quat_multiply_t(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> Grads:
        ga = np.einsum("...ij,...i->...j", _right_matrix(b.data), g)
        gb = np.einsum("...ij,...i->...j", _left_matrix(a.data), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return custom(quat_multiply(a.data, b.data), (a, b), backward)


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float
    valid: bool = True


@dataclass(frozen=True)
class CameraParams:
    q: np.ndarray
    t: np.ndarray
    f: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        f = np.asarray(self.f, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t)) and np.all(np.isfinite(f))):
            raise InvalidCamera("camera parameters must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise InvalidCamera("camera quaternion has zero norm")
        if np.any(f <= 0.0):
            raise InvalidCamera(f"focal lengths must be positive, got {f.tolist()}")
        q = q / n
        for arr in (q, t, f):
            arr.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "f", f)

    @classmethod
    def identity(cls, focal: float, width: int, height: int) -> "CameraParams":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.array([focal, focal]), width, height)

    @classmethod
    def from_vector(cls, vec: Sequence[float], width: int, height: int) -> "CameraParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0:4], vec[4:7], vec[7:9], width, height)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t, self.f])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.t

    def extrinsic(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.t
        return out


def project_points(cam: CameraParams, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) world points; returns (N, 2) pixels and an (N,) validity mask."""
    xc = np.asarray(pts, dtype=np.float64) @ cam.rotation.T + cam.t
    z = xc[..., 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [cam.f[0] * xc[..., 0] / zs + cam.cx, cam.f[1] * xc[..., 1] / zs + cam.cy],
        axis=-1,
    )
    return uv, valid


def project_point(cam: CameraParams, p: Sequence[float]) -> PixelCoord:
    uv, valid = project_points(cam, np.asarray(p, dtype=np.float64)[None, :])
    return PixelCoord(float(uv[0, 0]), float(uv[0, 1]), bool(valid[0]))


def unproject_pixel(cam: CameraParams, u: float, v: float, depth: float) -> np.ndarray:
    xc = np.array(
        [(u - cam.cx) / cam.f[0] * depth, (v - cam.cy) / cam.f[1] * depth, depth]
    )
    return cam.rotation.T @ (xc - cam.t)


def backproject_depth(cam: CameraParams, depth: np.ndarray) -> np.ndarray:
    """World points (H, W, 3) for a camera-z depth map (H, W)."""
    h, w = depth.shape
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xc = np.stack(
        [(uu - cam.cx) / cam.f[0] * depth, (vv - cam.cy) / cam.f[1] * depth, depth],
        axis=-1,
    )
    return (xc - cam.t) @ cam.rotation


def sample_bilinear(img: Tensor, uv: Tensor) -> Tensor:
    """Differentiable bilinear lookup of (N, 2) pixel coords in an (H, W, C) image.

    Coordinates are clamped to the pixel-center rectangle; a clamped coordinate
    has zero gradient.
    """
    img, uv = as_tensor(img), as_tensor(uv)
    h, w = img.shape[0], img.shape[1]
    u_raw, v_raw = uv.data[:, 0], uv.data[:, 1]
    u = np.clip(u_raw, 0.0, w - 1.0)
    v = np.clip(v_raw, 0.0, h - 1.0)
    u_in = (u_raw > 0.0) & (u_raw < w - 1.0)
    v_in = (v_raw > 0.0) & (v_raw < h - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (u - x0)[:, None]
    wy = (v - y0)[:, None]
    data = img.data
    i00, i01 = data[y0, x0], data[y0, x1]
    i10, i11 = data[y1, x0], data[y1, x1]
    top = i00 * (1.0 - wx) + i01 * wx
    bottom = i10 * (1.0 - wx) + i11 * wx
    out = top * (1.0 - wy) + bottom * wy

    def backward(g: np.ndarray) -> Grads:
        g_img = np.zeros_like(data)
        np.add.at(g_img, (y0, x0), g * (1.0 - wx) * (1.0 - wy))
        np.add.at(g_img, (y0, x1), g * wx * (1.0 - wy))
        np.add.at(g_img, (y1, x0), g * (1.0 - wx) * wy)
        np.add.at(g_img, (y1, x1), g * wx * wy)
        du = ((i01 - i00) * (1.0 - wy) + (i11 - i10) * wy) * g
        dv = (bottom - top) * g
        g_uv = np.stack([du.sum(axis=-1) * u_in, dv.sum(axis=-1) * v_in], axis=-1)
        return g_img, g_uv

    return custom(out, (img, uv), backward)


def bilinear_sample(img: np.ndarray, at: PixelCoord) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    out = sample_bilinear(Tensor(img), Tensor(np.array([[at.u, at.v]])))
    return out.data[0]


def canonicalize_poses(cams: Sequence[CameraParams]) -> list[CameraParams]:
    """Re-express every camera in the frame of camera 0."""
    if not cams:
        return []
    ref = cams[0]
    ref_conj = quat_conjugate(ref.q)
    out = []
    for cam in cams:
        q = quat_multiply(cam.q, ref_conj)
        t = cam.t - quat_to_rotmat(q) @ ref.t
        out.append(CameraParams(q, t, cam.f, cam.width, cam.height))
    return out


def relative_rotation_error(a: CameraParams, b: CameraParams) -> float:
    dot = abs(float(np.dot(a.q, b.q)))
    return float(np.degrees(2.0 * np.arccos(min(dot, 1.0))))


def relative_pose(a: CameraParams, b: CameraParams) -> CameraParams:
    """Camera b expressed in the frame of camera a."""
    return canonicalize_poses([a, b])[1]


@dataclass
class CameraTensors:
    """Per-view cameras on the tape: q (V, 4), t (V, 3), f (V, 2)."""

    q: Tensor
    t: Tensor
    f: Tensor
    width: int
    height: int

    def __len__(self) -> int:
        return self.q.shape[0]

    def view(self, i: int) -> tuple[Tensor, Tensor, Tensor]:
        return self.q[i], self.t[i], self.f[i]

    def vectors(self) -> Tensor:
        return concat([self.q, self.t, self.f], axis=1)

    def to_params(self) -> list[CameraParams]:
        return [
            CameraParams(self.q.data[i], self.t.data[i], self.f.data[i], self.width, self.height)
            for i in range(len(self))
        ]

    @classmethod
    def from_params(cls, cams: Sequence[CameraParams]) -> "CameraTensors":
        return cls(
            Tensor(np.stack([c.q for c in cams])),
            Tensor(np.stack([c.t for c in cams])),
            Tensor(np.stack([c.f for c in cams])),
            cams[0].width,
            cams[0].height,
        )


def canonicalize_tensors(cams: CameraTensors) -> tuple[CameraTensors, Tensor, Tensor]:
    """Tape version of ``canonicalize_poses``.

    Returns the canonical cameras plus camera 0's rotation matrix and
    translation, which map old world points into the new frame as
    ``p @ R0.T + t0``.
    """
    q0 = cams.q[0]
    ref_conj = q0 * np.array([1.0, -1.0, -1.0, -1.0])
    q = quat_multiply_t(cams.q, ref_conj)
    rot = quat_to_rotmat_t(q)
    t0 = cams.t[0]
    moved = (rot @ t0.reshape(3, 1)).reshape(len(cams), 3)
    t = cams.t - moved
    r0 = quat_to_rotmat_t(q0)
    return CameraTensors(q, t, cams.f, cams.width, cams.height), r0, t0


def project_points_t(
    q: Tensor, t: Tensor, f: Tensor, pts: Tensor, width: int, height: int
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Tape projection of (N, 3) points; returns (N, 2) pixels, validity and z."""
    rot = quat_to_rotmat_t(q)
    xc = pts @ rot.transpose(1, 0) + t
    z = xc.data[:, 2]
    valid = z > Z_MIN
    zs = where(valid, xc[:, 2], 1.0)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    u = f[0] * xc[:, 0] / zs + cx
    v = f[1] * xc[:, 1] / zs + cy
    return concat([u.reshape(-1, 1), v.reshape(-1, 1)], axis=1), valid, z
