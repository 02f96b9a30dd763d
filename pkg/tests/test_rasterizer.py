import numpy as np
import pytest

from unisplat.camera import CameraParams
from unisplat.checks import check_rasterizer, compare_with_reference, reference_composite
from unisplat.errors import NoForwardTape, NonFiniteInput, ShapeError
from unisplat.gaussians import GeometricGaussians, field_from_arrays
from unisplat.rasterizer import (
    RasterOptions,
    RenderedMaps,
    importance_for_masking,
    project_gaussian,
    render,
    render_backward,
)
from unisplat.tensor import Tensor

IDENTITY_R = np.array([1.0, 0.0, 0.0, 0.0])


def cam(size=9, focal=100.0):
    return CameraParams.identity(focal, size, size)


def geometric(centers, sigma, beta, scale=0.5):
    n = len(centers)
    return GeometricGaussians(
        mu=Tensor(np.asarray(centers, dtype=np.float64)),
        sigma=Tensor(np.asarray(sigma, dtype=np.float64)),
        r=Tensor(np.tile(IDENTITY_R, (n, 1))),
        s=Tensor(np.full((n, 3), scale)),
        beta=Tensor(np.asarray(beta, dtype=np.float64)),
    )


COVARIANCES = [(1.0, 100.1), (2.0, 25.1)]


@pytest.mark.parametrize("z,var", COVARIANCES)
def test_isotropic_covariance(z, var):
    splat = project_gaussian(
        CameraParams.identity(100.0, 128, 128), (0.0, 0.0, z), IDENTITY_R, np.full(3, 0.1)
    )
    assert splat is not None
    assert np.allclose(splat.cov2d, np.diag([var, var]))
    assert (splat.mean2d.u, splat.mean2d.v) == pytest.approx((63.5, 63.5))
    assert splat.depth == pytest.approx(z)


@pytest.mark.parametrize("center", [(0.0, 0.0, -1.0), (50.0, 0.0, 1.0)])
def test_projection_culls(center):
    assert project_gaussian(cam(), center, IDENTITY_R, np.full(3, 0.01)) is None


def test_empty_field_renders_zeros():
    empty = field_from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    maps = render(cam(), empty)
    assert maps.rgb.shape == (9, 9, 3)
    assert maps.sem.shape == (9, 9, 64)
    assert not maps.alpha.data.any()
    assert not maps.rgb.data.any()


def test_single_opaque_splat_importance():
    maps = render(cam(), geometric([[0.0, 0.0, 2.0]], [1.0], [3.0]), ("importance",))
    # opacity is capped just below one
    assert maps.importance.data[4, 4] == pytest.approx(3.0, rel=2e-3)
    assert maps.alpha.data[4, 4] == pytest.approx(1.0, rel=2e-3)
    assert maps.depth.data[4, 4] == pytest.approx(2.0, rel=2e-3)


def test_two_coincident_splats_importance():
    fld = geometric([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]], [0.5, 0.5], [1.0, 2.0])
    maps = render(cam(), fld, ("importance",))
    assert maps.importance.data[4, 4] == pytest.approx(1.0)
    assert maps.alpha.data[4, 4] == pytest.approx(0.75)


def test_front_splat_wins_regardless_of_order():
    back_first = geometric([[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]], [0.5, 0.5], [2.0, 1.0])
    front_first = geometric([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]], [0.5, 0.5], [1.0, 2.0])
    a = render(cam(), back_first, ("importance",)).importance.data[4, 4]
    b = render(cam(), front_first, ("importance",)).importance.data[4, 4]
    assert a == pytest.approx(b)


def test_zero_importance_weights():
    maps = importance_for_masking([cam(), cam()], geometric([[0.0, 0.0, 2.0]], [0.8], [0.0]))
    assert len(maps) == 2
    assert all(not m.data.any() for m in maps)


def test_non_finite_gaussian():
    fld = field_from_arrays([[0.0, 0.0, np.nan]], np.ones((1, 3)), np.ones(1), IDENTITY_R, np.ones((1, 3)))
    with pytest.raises(NonFiniteInput):
        render(cam(), fld)


def test_missing_channel():
    with pytest.raises(ShapeError):
        render(cam(), geometric([[0.0, 0.0, 2.0]], [1.0], [1.0]), ("rgb",))


def test_tape_camera_needs_size():
    fld = geometric([[0.0, 0.0, 2.0]], [1.0], [1.0])
    c = cam()
    with pytest.raises(ShapeError):
        render((Tensor(c.q), Tensor(c.t), Tensor(c.f)), fld, ("importance",))


def test_render_backward_without_forward():
    maps = RenderedMaps(depth=Tensor(np.zeros((2, 2))), alpha=Tensor(np.zeros((2, 2))))
    with pytest.raises(NoForwardTape):
        render_backward(maps, {})


def opaque_field():
    return field_from_arrays(
        [[0.0, 0.0, 2.0]], [[0.2, 0.4, 0.6]], [1.0], IDENTITY_R, np.full((1, 3), 0.5)
    )


def test_render_backward_red_channel():
    maps = render(cam(), opaque_field(), ("rgb",))
    upstream = np.zeros((9, 9, 3))
    upstream[4, 4, 0] = 1.0
    grads = render_backward(maps, {"rgb": upstream})
    assert grads["payload"][0, 0] == pytest.approx(1.0, rel=2e-3)
    assert np.allclose(grads["payload"][0, 1:], 0.0)


def test_render_backward_zero_upstream():
    maps = render(cam(), opaque_field(), ("rgb",))
    grads = render_backward(maps, {"rgb": np.zeros((9, 9, 3)), "depth": np.zeros((9, 9))})
    for g in grads.values():
        assert not np.any(g)


def test_render_backward_unknown_plane():
    maps = render(cam(), opaque_field(), ("rgb",))
    with pytest.raises(ShapeError):
        render_backward(maps, {"sem": np.zeros((9, 9, 64))})


def test_blend_weights_never_exceed_one():
    rng = np.random.default_rng(5)
    n = 30
    fld = field_from_arrays(
        np.column_stack([rng.uniform(-0.02, 0.02, (n, 2)), rng.uniform(1.0, 3.0, n)]),
        rng.uniform(size=(n, 3)),
        np.full(n, 0.99),
        np.tile(IDENTITY_R, (n, 1)),
        np.full((n, 3), 0.3),
    )
    maps = render(cam(), fld, ("rgb",))
    assert maps.alpha.data.max() <= 1.0
    assert np.all(maps.rgb.data <= 1.0 + 1e-12)


def random_field(rng, n, spread=0.4, scale=(0.02, 0.2)):
    q = rng.normal(size=(n, 4))
    return field_from_arrays(
        np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(1.5, 3.5, n)]),
        rng.uniform(size=(n, 3)),
        rng.uniform(0.05, 0.99, n),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        rng.uniform(*scale, (n, 3)),
    )


def permuted(fld, order):
    return type(fld)(**{k: Tensor(v.data[order]) if isinstance(v, Tensor) else v for k, v in vars(fld).items()})


@pytest.mark.parametrize("seed", range(4))
def test_render_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    fld = random_field(rng, 30)
    shuffled = permuted(fld, rng.permutation(30))
    a = render(cam(size=24, focal=40.0), fld, ("rgb",))
    b = render(cam(size=24, focal=40.0), shuffled, ("rgb",))
    for plane in ("rgb", "depth", "alpha"):
        assert np.allclose(getattr(a, plane).data, getattr(b, plane).data, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_doubling_beta_doubles_importance(seed):
    rng = np.random.default_rng(seed)
    n = 12
    centers = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(1.5, 3.0, n)])
    sigma = rng.uniform(0.1, 0.9, n)
    beta = rng.uniform(0.0, 2.0, n)
    (one,) = importance_for_masking([cam(size=16, focal=30.0)], geometric(centers, sigma, beta, scale=0.1))
    (two,) = importance_for_masking([cam(size=16, focal=30.0)], geometric(centers, sigma, 2.0 * beta, scale=0.1))
    assert np.allclose(two.data, 2.0 * one.data, atol=1e-12)


def test_blend_weight_sum_bounded_over_a_million_pixels():
    rng = np.random.default_rng(11)
    pixels = 0
    while pixels < 1_000_000:
        maps = render(cam(size=250, focal=250.0), random_field(rng, 20, spread=0.6, scale=(0.01, 0.08)), ("rgb",))
        alpha = maps.alpha.data
        assert alpha.min() >= 0.0
        assert alpha.max() <= 1.0
        pixels += alpha.size
seed, early_exit):
    diff, max_alpha = compare_with_reference(seed, n=12, options=RasterOptions(early_exit=early_exit))
    assert diff <= 1e-6
    assert max_alpha <= 1.0


def test_flat_falloff_matches_reference():
    diff, _ = compare_with_reference(3, n=6, options=RasterOptions(falloff=False, support_sigmas=None))
    assert diff < 1e-9


@pytest.mark.parametrize("seed", range(0, 100, 7))
def test_default_render_matches_dense_reference(seed):
    diff, _ = compare_with_reference(seed, n=1 + seed % 50)
    assert diff <= 1e-6


def test_default_support_reaches_past_four_sigma():
    c = CameraParams.identity(10.0, 9, 9)
    fld = field_from_arrays([[0.0, 0.0, 2.0]], [[1.0, 1.0, 1.0]], [0.9], IDENTITY_R, np.full((1, 3), 0.22))
    expected = 0.9 * np.exp(-0.5 * 32.0 / (1.1**2 + 0.1))
    assert render(c, fld, ("rgb",)).alpha.data[0, 0] == pytest.approx(expected, rel=1e-9)
    narrow = render(c, fld, ("rgb",), options=RasterOptions(support_sigmas=4.0))
    assert narrow.alpha.data[0, 0] == 0.0


def test_reference_depth_plane_of_single_splat():
    c = cam()
    out = reference_composite(
        c, np.array([[0.0, 0.0, 2.0]]), IDENTITY_R[None], np.full((1, 3), 0.5), np.array([0.5]), np.ones((1, 1))
    )
    assert out[4, 4, 1] == pytest.approx(1.0)
    assert out[4, 4, 2] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    rec = check_rasterizer(seed)
    assert rec.passed, rec
