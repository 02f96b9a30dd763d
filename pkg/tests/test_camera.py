import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from unisplat.camera import (
    CameraParams,
    CameraTensors,
    PixelCoord,
    backproject_depth,
    bilinear_sample,
    canonicalize_poses,
    canonicalize_tensors,
    project_point,
    project_points,
    project_points_t,
    quat_multiply,
    quat_to_rotmat,
    relative_pose,
    relative_rotation_error,
    rotmat_to_quat,
    sample_bilinear,
    unproject_pixel,
)
from unisplat.errors import InvalidCamera
from unisplat.optim import grad_check
from unisplat.tensor import parameter

QZ90 = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])


def camera(q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0), f=100.0, size=128):
    return CameraParams(np.array(q), np.array(t), np.array([f, f]), size, size)


PROJECTIONS = [
    ((0.0, 0.0, 1.0), (63.5, 63.5), True),
    ((0.1, 0.0, 1.0), (73.5, 63.5), True),
    ((0.0, 0.1, 2.0), (63.5, 68.5), True),
]


@pytest.mark.parametrize("p,uv,valid", PROJECTIONS)
def test_project_point(p, uv, valid):
    px = project_point(camera(), p)
    assert (px.u, px.v) == pytest.approx(uv)
    assert px.valid is valid


def test_project_point_behind_camera():
    assert not project_point(camera(), (0.0, 0.0, -1.0)).valid


@pytest.mark.parametrize(
    "kwargs",
    [
        {"f": 0.0},
        {"f": -5.0},
        {"q": (0.0, 0.0, 0.0, 0.0)},
        {"t": (0.0, np.nan, 0.0)},
    ],
)
def test_invalid_camera(kwargs):
    with pytest.raises(InvalidCamera):
        camera(**kwargs)


def test_quaternion_is_normalized():
    cam = camera(q=(2.0, 0.0, 0.0, 0.0))
    assert np.allclose(cam.q, [1.0, 0.0, 0.0, 0.0])


def test_quaternion_matches_scipy(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    assert np.allclose(quat_to_rotmat(q), ref)
    back = rotmat_to_quat(ref)
    assert back[0] >= 0.0
    assert np.allclose(np.abs(back @ q), 1.0)


def test_unproject_inverts_project(rng):
    cam = camera(q=QZ90, t=(0.1, -0.2, 2.0))
    p = rng.uniform(-0.5, 0.5, 3)
    px = project_point(cam, p)
    depth = (cam.rotation @ p + cam.t)[2]
    assert np.allclose(unproject_pixel(cam, px.u, px.v, depth), p)


def test_backproject_depth_reprojects_to_pixel_grid():
    cam = camera(q=QZ90, t=(0.0, 0.0, 1.0), f=10.0, size=8)
    pts = backproject_depth(cam, np.full((8, 8), 2.0))
    uv, valid = project_points(cam, pts.reshape(-1, 3))
    vv, uu = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
    assert valid.all()
    assert np.allclose(uv, np.stack([uu.ravel(), vv.ravel()], axis=-1))


BILINEAR = [
    (0.0, 0.0, 0.0),
    (0.5, 0.5, 1.5),
    (1.0, 0.0, 1.0),
    (-1.0, 0.0, 0.0),
    (-1.0, -1.0, 0.0),
    (5.0, 5.0, 3.0),
]


@pytest.mark.parametrize("u,v,expected", BILINEAR)
def test_bilinear_sample(u, v, expected):
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(img, PixelCoord(u, v)) == pytest.approx([expected])


def test_bilinear_clamped_coordinate_has_zero_grad():
    img = parameter(np.array([[[0.0], [1.0]], [[2.0], [3.0]]]), "img")
    uv = parameter(np.array([[-1.0, 0.5]]), "uv")
    sample_bilinear(img, uv).sum().backward()
    assert uv.grad[0, 0] == 0.0
    assert uv.grad[0, 1] == pytest.approx(2.0)


def test_canonicalize_single_camera():
    (c,) = canonicalize_poses([camera(q=QZ90, t=(1.0, 2.0, 3.0), f=70.0)])
    assert np.allclose(c.q, [1.0, 0.0, 0.0, 0.0])
    assert np.allclose(c.t, 0.0)
    assert np.allclose(c.f, 70.0)


def test_canonicalize_identical_cameras():
    cam = camera(q=QZ90, t=(1.0, 2.0, 3.0))
    for c in canonicalize_poses([cam, cam]):
        assert np.allclose(c.extrinsic(), np.eye(4))


def test_canonicalize_preserves_relative_pose(rng):
    cams = []
    for _ in range(3):
        q = rng.normal(size=4)
        cams.append(camera(q=q, t=rng.normal(size=3)))
    before = cams[1].extrinsic() @ np.linalg.inv(cams[0].extrinsic())
    canon = canonicalize_poses(cams)
    after = canon[1].extrinsic() @ np.linalg.inv(canon[0].extrinsic())
    assert np.allclose(before, after)
    rel = relative_pose(cams[0], cams[2])
    assert np.allclose(rel.extrinsic(), canon[2].extrinsic())


ROTATION_ERRORS = [
    ((1.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), 0.0),
    ((1.0, 0.0, 0.0, 0.0), tuple(QZ90), 90.0),
    (tuple(QZ90), tuple(-QZ90), 0.0),
]


@pytest.mark.parametrize("qa,qb,deg", ROTATION_ERRORS)
def test_relative_rotation_error(qa, qb, deg):
    assert relative_rotation_error(camera(q=qa), camera(q=qb)) == pytest.approx(deg, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_rotation_error_triangle_inequality(seed):
    quats = Rotation.random(300, random_state=seed).as_quat()[:, [3, 0, 1, 2]]
    for qa, qb, qc in quats.reshape(100, 3, 4):
        a, b, c = camera(q=qa), camera(q=qb), camera(q=qc)
        ac = relative_rotation_error(a, c)
        assert 0.0 <= ac <= 180.0 + 1e-9
        assert ac <= relative_rotation_error(a, b) + relative_rotation_error(b, c) + 1e-6


def test_canonicalize_is_idempotent(rng):
    cams = [camera(q=rng.normal(size=4), t=rng.normal(size=3), f=60.0, size=32) for _ in range(4)]
    once = canonicalize_poses(cams)
    twice = canonicalize_poses(once)
    for a, b in zip(once, twice, strict=True):
        assert np.allclose(a.extrinsic(), b.extrinsic(), atol=1e-12)
        assert np.allclose(a.f, b.f)


def test_quat_multiply_composes_rotations(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    assert np.allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b))


def test_canonicalize_tensors_matches_numpy(rng):
    cams = [camera(q=rng.normal(size=4), t=rng.normal(size=3), f=50.0, size=32) for _ in range(3)]
    canon, r0, t0 = canonicalize_tensors(CameraTensors.from_params(cams))
    for got, ref in zip(canon.to_params(), canonicalize_poses(cams), strict=True):
        assert np.allclose(got.extrinsic(), ref.extrinsic())
    p = rng.normal(size=3)
    moved = r0.data @ p + t0.data
    assert np.allclose(moved, cams[0].rotation @ p + cams[0].t)


def test_tape_projection_matches_numpy_and_gradients(rng):
    cam = camera(q=(0.98, 0.1, -0.05, 0.02), t=(0.1, 0.0, 2.5), f=20.0, size=24)
    pts = rng.uniform(-0.4, 0.4, (6, 3))
    q, t, f = parameter(cam.q, "q"), parameter(cam.t, "t"), parameter(cam.f, "f")
    x = parameter(pts, "pts")
    uv, valid, _ = project_points_t(q, t, f, x, 24, 24)
    ref, ref_valid = project_points(cam, pts)
    assert np.allclose(uv.data, ref)
    assert np.array_equal(valid, ref_valid)
    w = rng.normal(size=(6, 2))
    rec = grad_check(
        lambda: (project_points_t(q, t, f, x, 24, 24)[0] * w).sum(),
        {"q": q, "t": t, "f": f, "pts": x},
        tolerance=1e-5,
    )
    assert rec.passed, rec
