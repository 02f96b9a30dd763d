"""Depth-sorted alpha compositing of 3D Gaussians, with a hand-written backward.

Every Gaussian is projected with the EWA approximation: the world covariance
R diag(s) diag(s) R^T is pushed through the camera rotation and the
perspective Jacobian, then regularized by ``COV2D_REG`` px^2. A splat covers
the pixels within ``support_sigmas`` Mahalanobis radii of its mean. Per pixel,
splats blend front to back with weights ``alpha_i * prod_{j<i} (1 - alpha_j)``.

The whole renderer is one tape node. Its payload is every requested channel
followed by camera z (for depth) and a constant 1 (for alpha), so one
compositing pass produces every output plane.
"""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import sparse

from .camera import CameraParams, PixelCoord, quat_to_rotmat, rotmat_grad_to_quat
from .constants import (
    ALPHA_MAX,
    COV2D_REG,
    CULL_SIGMAS,
    SUPPORT_SIGMAS,
    TRANSMITTANCE_MIN,
    Z_MIN,
)
from .errors import NoForwardTape, NonFiniteInput, ShapeError
from .gaussians import GeometricGaussians, RenderGaussians
from .tensor import Grads, Tensor, as_tensor, concat, custom

Channel = Literal["rgb", "sem", "importance"]

PAIR_CHUNK = 1 << 16


@dataclass(frozen=True)
class RasterOptions:
    support_sigmas: float | None = SUPPORT_SIGMAS
    early_exit: bool = True
    falloff: bool = True


@dataclass(frozen=True)
class Splat2D:
    mean2d: PixelCoord
    cov2d: np.ndarray
    depth: float
    payload: np.ndarray
    sigma: float


@dataclass
class _Projected:
    xc: np.ndarray
    z: np.ndarray
    rot: np.ndarray
    m: np.ndarray
    cov3d: np.ndarray
    jac: np.ndarray
    tj: np.ndarray
    cov: np.ndarray
    mean: np.ndarray
    keep: np.ndarray


def _project(
    rc: np.ndarray,
    t: np.ndarray,
    f: np.ndarray,
    mu: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    width: int,
    height: int,
) -> _Projected:
    n = mu.shape[0]
    xc = mu @ rc.T + t
    z = xc[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    x, y = xc[:, 0], xc[:, 1]
    fx, fy = f[0], f[1]

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / zs**2

    rot = quat_to_rotmat(r)
    m = rot * s[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    tj = jac @ rc
    cov = tj @ cov3d @ np.swapaxes(tj, 1, 2) + COV2D_REG * np.eye(2)
    mean = np.stack([fx * x / zs + (width - 1) / 2.0, fy * y / zs + (height - 1) / 2.0], axis=-1)

    reach = CULL_SIGMAS * np.sqrt(_lambda_max(cov))
    inside = (
        (mean[:, 0] + reach >= -0.5)
        & (mean[:, 0] - reach <= width - 0.5)
        & (mean[:, 1] + reach >= -0.5)
        & (mean[:, 1] - reach <= height - 0.5)
    )
    return _Projected(xc, z, rot, m, cov3d, jac, tj, cov, mean, front & inside)


def _lambda_max(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    return 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)


def project_gaussian(
    cam: CameraParams,
    center: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    sigma: float = 1.0,
    payload: np.ndarray | None = None,
) -> Splat2D | None:
    """Project a single Gaussian; ``None`` when it is culled."""
    p = _project(
        cam.rotation,
        cam.t,
        cam.f,
        np.asarray(center, dtype=np.float64).reshape(1, 3),
        np.asarray(r, dtype=np.float64).reshape(1, 4),
        np.asarray(s, dtype=np.float64).reshape(1, 3),
        cam.width,
        cam.height,
    )
    if not p.keep[0]:
        return None
    return Splat2D(
        mean2d=PixelCoord(float(p.mean[0, 0]), float(p.mean[0, 1])),
        cov2d=p.cov[0],
        depth=float(p.z[0]),
        payload=np.zeros(0) if payload is None else np.asarray(payload, dtype=np.float64),
        sigma=float(sigma),
    )


@dataclass
class RasterTape:
    """Everything the backward pass needs from one forward composite."""

    width: int
    height: int
    channels: int
    n: int
    rc: np.ndarray
    q: np.ndarray
    f: np.ndarray
    mu: np.ndarray
    r: np.ndarray
    s: np.ndarray
    order: np.ndarray
    proj: _Projected
    ext: np.ndarray
    conic: np.ndarray
    options: RasterOptions
    proj_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: sparse.csr_matrix | None = None
    pair_g: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_pix: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dx: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    falloff: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(0))
    live: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seg_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seg_end: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def backward(self, upstream: np.ndarray) -> dict[str, np.ndarray]:
        n, c = self.n, self.channels
        grads = {
            "center": np.zeros((n, 3)),
            "r": np.zeros((n, 4)),
            "s": np.zeros((n, 3)),
            "sigma": np.zeros(n),
            "payload": np.zeros((n, c)),
            "q": np.zeros(4),
            "t": np.zeros(3),
            "f": np.zeros(2),
        }
        if self.weights is None or self.pair_g.size == 0:
            return grads

        k_count = self.order.size
        gflat = np.asarray(upstream, dtype=np.float64).reshape(self.height * self.width, c + 2)
        d_ext = np.asarray(self.weights.T @ gflat)

        a = np.empty(self.pair_g.size)
        for lo in range(0, a.size, PAIR_CHUNK):
            hi = lo + PAIR_CHUNK
            a[lo:hi] = np.einsum(
                "ij,ij->i", gflat[self.pair_pix[lo:hi]], self.ext[self.pair_g[lo:hi]]
            )

        cum = np.cumsum(a * self.w)
        behind = cum[self.seg_end][self.seg_id] - cum
        d_alpha = np.where(self.live, self.trans * a, 0.0) - behind / (1.0 - self.alpha)
        d_alpha = np.where(self.alpha_raw > ALPHA_MAX, 0.0, d_alpha)

        d_sigma = np.bincount(self.pair_g, d_alpha * self.falloff, minlength=k_count)

        if self.options.falloff:
            dq = d_alpha * self.proj_sigma[self.pair_g] * self.falloff * -0.5
        else:
            dq = np.zeros_like(d_alpha)
        ca, cb, cc = self.conic[:, 0, 0], self.conic[:, 0, 1], self.conic[:, 1, 1]
        dx, dy, g = self.dx, self.dy, self.pair_g
        d_ca = np.bincount(g, dq * dx * dx, minlength=k_count)
        d_cb = np.bincount(g, dq * 2.0 * dx * dy, minlength=k_count)
        d_cc = np.bincount(g, dq * dy * dy, minlength=k_count)
        du = np.bincount(g, -dq * (2.0 * ca[g] * dx + 2.0 * cb[g] * dy), minlength=k_count)
        dv = np.bincount(g, -dq * (2.0 * cb[g] * dx + 2.0 * cc[g] * dy), minlength=k_count)

        g_conic = np.empty((k_count, 2, 2))
        g_conic[:, 0, 0] = d_ca
        g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_cb
        g_conic[:, 1, 1] = d_cc
        g_cov = -self.conic @ g_conic @ self.conic

        p = self.proj
        idx = self.order
        tj, cov3d, m, rot = p.tj[idx], p.cov3d[idx], p.m[idx], p.rot[idx]
        g_tj = 2.0 * g_cov @ tj @ cov3d
        g_cov3d = np.swapaxes(tj, 1, 2) @ g_cov @ tj
        g_m = 2.0 * g_cov3d @ m
        s_k = self.s[idx]
        g_s = np.sum(g_m * rot, axis=1)
        g_r = rotmat_grad_to_quat(self.r[idx], g_m * s_k[:, None, :])

        jac = p.jac[idx]
        g_jac = g_tj @ self.rc.T
        g_rc = np.einsum("kij,kil->jl", jac, g_tj)

        fx, fy = self.f[0], self.f[1]
        x, y, z = p.xc[idx, 0], p.xc[idx, 1], p.xc[idx, 2]
        z2, z3 = z * z, z * z * z
        g_x = g_jac[:, 0, 2] * (-fx / z2) + du * fx / z
        g_y = g_jac[:, 1, 2] * (-fy / z2) + dv * fy / z
        g_z = (
            g_jac[:, 0, 0] * (-fx / z2)
            + g_jac[:, 0, 2] * (2.0 * fx * x / z3)
            + g_jac[:, 1, 1] * (-fy / z2)
            + g_jac[:, 1, 2] * (2.0 * fy * y / z3)
            - du * fx * x / z2
            - dv * fy * y / z2
            + d_ext[:, c]
        )
        g_fx = np.sum(g_jac[:, 0, 0] / z - g_jac[:, 0, 2] * x / z2 + du * x / z)
        g_fy = np.sum(g_jac[:, 1, 1] / z - g_jac[:, 1, 2] * y / z2 + dv * y / z)

        g_xc = np.stack([g_x, g_y, g_z], axis=-1)
        mu_k = self.mu[idx]
        g_rc += g_xc.T @ mu_k

        grads["center"][idx] = g_xc @ self.rc
        grads["r"][idx] = g_r
        grads["s"][idx] = g_s
        grads["sigma"][idx] = d_sigma
        grads["payload"][idx] = d_ext[:, :c]
        grads["q"] = rotmat_grad_to_quat(self.q, g_rc)
        grads["t"] = g_xc.sum(axis=0)
        grads["f"] = np.array([g_fx, g_fy])
        return grads


def _check_finite(named: dict[str, np.ndarray]) -> None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput(f"non-finite values in Gaussian parameter '{name}'")


def rasterize(
    center: Tensor,
    r: Tensor,
    s: Tensor,
    sigma: Tensor,
    payload: Tensor,
    q: Tensor,
    t: Tensor,
    f: Tensor,
    width: int,
    height: int,
    options: RasterOptions | None = None,
) -> tuple[Tensor, RasterTape]:
    """Composite ``payload`` into an (H, W, C + 2) tensor: channels, depth, alpha."""
    options = options or RasterOptions()
    center, r, s, sigma = as_tensor(center), as_tensor(r), as_tensor(s), as_tensor(sigma)
    payload, q, t, f = as_tensor(payload), as_tensor(q), as_tensor(t), as_tensor(f)
    if width <= 0 or height <= 0:
        raise ShapeError(f"image size must be positive, got {width}x{height}")
    _check_finite(
        {
            "center": center.data,
            "r": r.data,
            "s": s.data,
            "sigma": sigma.data,
            "payload": payload.data,
            "camera": np.concatenate([q.data, t.data, f.data]),
        }
    )
    n = center.shape[0]
    c = payload.shape[1] if payload.ndim == 2 else 0
    payload_data = payload.data.reshape(n, c)

    rc = quat_to_rotmat(q.data)
    proj = _project(rc, t.data, f.data, center.data, r.data, s.data, width, height)
    kept = np.flatnonzero(proj.keep)
    order = kept[np.lexsort((kept, proj.z[kept]))]

    ext = np.concatenate([payload_data[order], proj.z[order, None], np.ones((order.size, 1))], axis=1)
    cov = proj.cov[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det

    tape = RasterTape(
        width=width,
        height=height,
        channels=c,
        n=n,
        rc=rc,
        q=q.data.copy(),
        f=f.data.copy(),
        mu=center.data.copy(),
        r=r.data.copy(),
        s=s.data.copy(),
        order=order,
        proj=proj,
        ext=ext,
        conic=conic,
        options=options,
        proj_sigma=sigma.data[order].copy(),
    )
    out = np.zeros((height, width, c + 2))
    if order.size:
        _composite(tape, out)

    parents = (center, r, s, sigma, payload, q, t, f)

    def backward(g: np.ndarray) -> Grads:
        grads = tape.backward(g)
        return (
            grads["center"],
            grads["r"],
            grads["s"],
            grads["sigma"].reshape(sigma.shape),
            grads["payload"].reshape(payload.shape),
            grads["q"],
            grads["t"],
            grads["f"],
        )

    return custom(out, parents, backward), tape


def _composite(tape: RasterTape, out: np.ndarray) -> None:
    width, height = tape.width, tape.height
    mean = tape.proj.mean[tape.order]
    u, v = mean[:, 0], mean[:, 1]
    support = tape.options.support_sigmas

    if support is None:
        x0 = np.zeros(u.size, dtype=np.int64)
        x1 = np.full(u.size, width - 1, dtype=np.int64)
        y0 = np.zeros(u.size, dtype=np.int64)
        y1 = np.full(u.size, height - 1, dtype=np.int64)
    else:
        rad = support * np.sqrt(_lambda_max(tape.proj.cov[tape.order]))
        x0 = np.maximum(np.ceil(u - rad), 0).astype(np.int64)
        x1 = np.minimum(np.floor(u + rad), width - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(v - rad), 0).astype(np.int64)
        y1 = np.minimum(np.floor(v + rad), height - 1).astype(np.int64)

    box_w = np.maximum(x1 - x0 + 1, 0)
    box_h = np.maximum(y1 - y0 + 1, 0)
    counts = box_w * box_h
    total = int(counts.sum())
    if total == 0:
        return

    g = np.repeat(np.arange(u.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[g] + local % box_w[g]
    py = y0[g] + local // box_w[g]
    dx = px - u[g]
    dy = py - v[g]
    ca, cb, cc = tape.conic[:, 0, 0], tape.conic[:, 0, 1], tape.conic[:, 1, 1]
    maha = ca[g] * dx * dx + 2.0 * cb[g] * dx * dy + cc[g] * dy * dy
    if support is not None:
        inside = maha <= support * support
        g, px, py, dx, dy, maha = g[inside], px[inside], py[inside], dx[inside], dy[inside], maha[inside]
        if g.size == 0:
            return

    # pairs were generated front to back, so a stable sort keeps depth order per pixel
    pix = py * width + px
    perm = np.argsort(pix, kind="stable")
    g, pix, dx, dy, maha = g[perm], pix[perm], dx[perm], dy[perm], maha[perm]

    falloff = np.exp(-0.5 * maha) if tape.options.falloff else np.ones_like(maha)
    alpha_raw = tape.proj_sigma[g] * falloff
    alpha = np.minimum(alpha_raw, ALPHA_MAX)

    first = np.r_[True, pix[1:] != pix[:-1]]
    seg_id = np.cumsum(first) - 1
    seg_start = np.flatnonzero(first)
    seg_end = np.r_[seg_start[1:], pix.size] - 1

    log_keep = np.log1p(-alpha)
    before = np.cumsum(log_keep) - log_keep
    trans = np.exp(before - before[seg_start][seg_id])
    if tape.options.early_exit:
        live = trans >= TRANSMITTANCE_MIN
    else:
        live = np.ones(trans.shape, dtype=bool)
    w = np.where(live, alpha * trans, 0.0)

    weights = sparse.csr_matrix((w, (pix, g)), shape=(height * width, u.size))
    out[...] = np.asarray(weights @ tape.ext).reshape(height, width, -1)

    tape.weights = weights
    tape.pair_g, tape.pair_pix = g, pix
    tape.dx, tape.dy = dx, dy
    tape.falloff, tape.alpha_raw, tape.alpha = falloff, alpha_raw, alpha
    tape.trans, tape.live, tape.w = trans, live, w
    tape.seg_id, tape.seg_end = seg_id, seg_end


@dataclass
class RenderedMaps:
    depth: Tensor
    alpha: Tensor
    rgb: Tensor | None = None
    sem: Tensor | None = None
    importance: Tensor | None = None
    layout: dict[str, slice] = field(default_factory=dict)
    tape: RasterTape | None = None


Camera = CameraParams | tuple[Tensor, Tensor, Tensor]


def _camera_inputs(
    cam: Camera, size: tuple[int, int] | None
) -> tuple[Tensor, Tensor, Tensor, int, int]:
    if isinstance(cam, CameraParams):
        return Tensor(cam.q), Tensor(cam.t), Tensor(cam.f), cam.width, cam.height
    if size is None:
        raise ShapeError("image size is required for tape cameras")
    q, t, f = cam
    width, height = size
    return as_tensor(q), as_tensor(t), as_tensor(f), width, height


def _field_inputs(
    fld: RenderGaussians | GeometricGaussians,
) -> tuple[Tensor, Tensor, Tensor, Tensor, dict[str, Tensor]]:
    if isinstance(fld, GeometricGaussians):
        return fld.mu, fld.r, fld.s, fld.sigma, {"importance": fld.beta.reshape(-1, 1)}
    return fld.center, fld.r, fld.s, fld.sigma, {"rgb": fld.color, "sem": fld.gamma}


def render(
    cam: Camera,
    fld: RenderGaussians | GeometricGaussians,
    channels: tuple[Channel, ...] = ("rgb", "sem"),
    *,
    size: tuple[int, int] | None = None,
    options: RasterOptions | None = None,
) -> RenderedMaps:
    """Render the selected channels plus depth and alpha from one camera.

    ``cam`` is either a ``CameraParams`` or tape tensors ``(q, t, f)`` with an
    explicit ``size`` of ``(width, height)``. Depth is the composited camera z,
    not divided by alpha.
    """
    q, t, f, width, height = _camera_inputs(cam, size)
    center, r, s, sigma, available = _field_inputs(fld)
    missing = [ch for ch in channels if ch not in available]
    if missing:
        raise ShapeError(f"field at this level cannot render channels {missing}")

    layout: dict[str, slice] = {}
    parts: list[Tensor] = []
    offset = 0
    for ch in channels:
        width_ch = available[ch].shape[1]
        layout[ch] = slice(offset, offset + width_ch)
        parts.append(available[ch])
        offset += width_ch
    n = center.shape[0]
    payload = concat(parts, axis=1) if parts else Tensor(np.zeros((n, 0)))

    packed, tape = rasterize(center, r, s, sigma, payload, q, t, f, width, height, options)
    maps = RenderedMaps(
        depth=packed[:, :, offset],
        alpha=packed[:, :, offset + 1],
        layout=layout,
        tape=tape,
    )
    for ch, sl in layout.items():
        plane = packed[:, :, sl]
        setattr(maps, ch, plane[:, :, 0] if ch == "importance" else plane)
    return maps


def render_backward(
    maps: RenderedMaps, upstream: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream[k] * maps.k)`` w.r.t. Gaussian and camera inputs.

    ``payload`` gradients come back in render-channel order.
    """
    if maps.tape is None:
        raise NoForwardTape("render_backward needs maps produced by render()")
    tape = maps.tape
    packed = np.zeros((tape.height, tape.width, tape.channels + 2))
    for name, g in upstream.items():
        g = np.asarray(g, dtype=np.float64)
        if name == "depth":
            packed[:, :, tape.channels] += g
        elif name == "alpha":
            packed[:, :, tape.channels + 1] += g
        elif name in maps.layout:
            sl = maps.layout[name]
            packed[:, :, sl] += g.reshape(tape.height, tape.width, -1)
        else:
            raise ShapeError(f"no rendered plane named '{name}'")
    return tape.backward(packed)


def importance_for_masking(
    cams: list[Camera],
    fld: GeometricGaussians,
    *,
    size: tuple[int, int] | None = None,
    options: RasterOptions | None = None,
) -> list[Tensor]:
    """Per-view importance maps J from the coarse field."""
    out = []
    for cam in cams:
        maps = render(cam, fld, ("importance",), size=size, options=options)
        assert maps.importance is not None
        out.append(maps.importance)
    return out
