"""Transformer encoder/decoder over patch, camera and Gaussian tokens, plus heads.

Blocks are pre-norm with no final norm, so a block whose output projections
are zero is the identity. Every learnable array lives in one flat, ordered
``dict[str, Tensor]`` so the optimizer, checkpoints and gradient checks can
walk it by name.
"""

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraTensors, quat_multiply_t
from .constants import EPS_DIM, FANOUT, RECORD_DIM, SCALE_MAX, SCALE_MIN
from .errors import ShapeError
from .gaussians import (
    AnchorGaussians,
    GeometricGaussians,
    RenderGaussians,
    expand_anchors_to_semantic,
    expand_semantic_to_appearance,
)
from .masking import (
    MaskSet,
    encoder_masks,
    patch_grid,
    patchify,
    unpatchify,
    with_geometry_masks,
)
from .models import RunConfig
from .rasterizer import RasterOptions, importance_for_masking
from .tensor import (
    Tensor,
    clip,
    concat,
    exp,
    gelu,
    layer_norm,
    log,
    normalize,
    parameter,
    sigmoid,
    softmax,
    softplus,
    stack,
    tanh,
)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
CAM_DIM = 9
GEO_DIM = 12

# slots inside a fan-out record / anchor head output
_ROT = 3 + 1
_SCALE = slice(3 + 5, 3 + 8)


@dataclass
class ModelParams:
    cfg: RunConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class EncodedState:
    y_vis: list[Tensor]
    cam: Tensor
    gauss: Tensor


@dataclass
class DecodedState:
    grid: list[Tensor]
    cam: Tensor
    gauss: Tensor
    mask_slots: int


@dataclass
class NetworkOutput:
    masks: MaskSet
    encoded: EncodedState
    decoded: DecodedState
    cams_coarse: CameraTensors
    geo: GeometricGaussians
    importance: list[np.ndarray]
    anchors: AnchorGaussians
    sem_offsets: Tensor
    app_offsets: Tensor
    points: Tensor
    confidence: Tensor
    cams_final: CameraTensors


def sincos_2d(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine position codes, half the channels per axis."""
    if dim % 4:
        raise ShapeError(f"position codes need a latent dim divisible by 4, got {dim}")
    gh, gw = grid
    omega = 1.0 / 10000.0 ** (np.arange(dim // 4) / (dim / 4.0))
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    def encode(pos: np.ndarray) -> np.ndarray:
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(rows), encode(cols)], axis=1)


def init_params(cfg: RunConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, p = cfg.dim, cfg.patch_size
    hidden = cfg.ffn_mult * d
    tensors: dict[str, Tensor] = {}

    def normal(name: str, *shape: int) -> None:
        tensors[name] = parameter(rng.normal(0.0, cfg.init_std, shape), name)

    def const(name: str, value: np.ndarray) -> None:
        tensors[name] = parameter(value, name)

    def dense(name: str, n_in: int, n_out: int, bias: np.ndarray | None = None) -> None:
        normal(f"{name}.w", n_in, n_out)
        const(f"{name}.b", np.zeros(n_out) if bias is None else bias)

    def block(prefix: str) -> None:
        const(f"{prefix}.ln1.g", np.ones(d))
        const(f"{prefix}.ln1.b", np.zeros(d))
        dense(f"{prefix}.attn.qkv", d, 3 * d)
        dense(f"{prefix}.attn.out", d, d)
        const(f"{prefix}.ln2.g", np.ones(d))
        const(f"{prefix}.ln2.b", np.zeros(d))
        dense(f"{prefix}.ffn.in", d, hidden)
        dense(f"{prefix}.ffn.out", hidden, d)

    dense("embed", 3 * p * p, d)
    normal("view_embed", cfg.views, d)
    normal("cam_tokens", cfg.views, d)
    normal("gauss_tokens", cfg.n_gauss, d)
    normal("mask_token", 1, d)
    for i in range(cfg.enc_depth):
        block(f"enc.{i}")
    for i in range(cfg.dec_depth):
        block(f"dec.{i}")

    log_scale = math.log(cfg.scale_init)
    geo_bias = np.zeros(GEO_DIM)
    geo_bias[4] = 1.0
    geo_bias[8:11] = log_scale
    record_bias = np.zeros(RECORD_DIM)
    record_bias[_ROT] = 1.0
    record_bias[_SCALE] = log_scale

    dense("head.cam.hidden", d, d)
    dense("head.cam.out", d, CAM_DIM)
    dense("head.gauss.hidden", d + CAM_DIM, d)
    dense("head.gauss.out", d, GEO_DIM, geo_bias)
    dense("head.anchor", d, RECORD_DIM, record_bias)
    dense("head.semantic", d, FANOUT * RECORD_DIM, np.tile(record_bias, FANOUT))
    normal("head.fanout_embed", FANOUT, d)
    dense("head.appearance", d, FANOUT * RECORD_DIM, np.tile(record_bias, FANOUT))
    dense("head.point", d, p * p * 4)
    dense("head.final_cam.hidden", d, d)
    dense("head.final_cam.out", d, CAM_DIM)
    return ModelParams(cfg, tensors)


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _mlp(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return _linear(gelu(_linear(x, params, f"{name}.hidden")), params, f"{name}.out")


def _attention(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    length, d = x.shape
    dh = d // heads
    qkv = _linear(x, params, f"{prefix}.qkv").reshape(length, 3, heads, dh).transpose(1, 2, 0, 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(1, 0, 2).reshape(length, d)
    return _linear(out, params, f"{prefix}.out")


def _block(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    heads = params.cfg.heads
    x = x + _attention(
        layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]),
        params,
        f"{prefix}.attn",
        heads,
    )
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return x + _linear(gelu(_linear(h, params, f"{prefix}.ffn.in")), params, f"{prefix}.ffn.out")


def _run_blocks(x: Tensor, params: ModelParams, stage: str, depth: int) -> Tensor:
    for i in range(depth):
        x = _block(x, params, f"{stage}.{i}")
    return x


def _positions(params: ModelParams) -> np.ndarray:
    cfg = params.cfg
    return sincos_2d(patch_grid(cfg.height, cfg.width, cfg.patch_size), cfg.dim)


def _gauss_inputs(params: ModelParams) -> Tensor:
    """Per-view copies of the shared Gaussian tokens, tagged with the view embedding."""
    views = params.cfg.views
    base = params["gauss_tokens"]
    return concat([base + params["view_embed"][v] for v in range(views)], axis=0)


def tokenize(images: np.ndarray, patch: int) -> list[np.ndarray]:
    return [patchify(img, patch).tokens for img in images]


def encode(params: ModelParams, tokens: list[np.ndarray], masks: MaskSet) -> EncodedState:
    """Full self-attention over visible patches, camera tokens and Gaussian tokens."""
    cfg = params.cfg
    views, d = cfg.views, cfg.dim
    if len(tokens) != views:
        raise ShapeError(f"expected {views} views of tokens, got {len(tokens)}")
    pos = _positions(params)
    embed_w = params["embed.w"]
    parts: list[Tensor] = []
    counts: list[int] = []
    for v, tok in enumerate(tokens):
        tok = np.asarray(tok, dtype=np.float64)
        if tok.shape != (cfg.n_patches, embed_w.shape[0]):
            raise ShapeError(
                f"view {v} tokens have shape {tok.shape}, expected {(cfg.n_patches, embed_w.shape[0])}"
            )
        vis = masks.visible(v)
        x = Tensor(tok[vis]) @ embed_w + params["embed.b"] + Tensor(pos[vis]) + params["view_embed"][v]
        parts.append(x)
        counts.append(vis.size)
    parts.append(params["cam_tokens"] + params["view_embed"])
    parts.append(_gauss_inputs(params))
    seq = _run_blocks(concat(parts, axis=0), params, "enc", cfg.enc_depth)
    if seq.shape[1] != d:
        raise ShapeError(f"encoder produced width {seq.shape[1]}, expected {d}")

    y_vis, offset = [], 0
    for n in counts:
        y_vis.append(seq[offset : offset + n])
        offset += n
    cam = seq[offset : offset + views]
    gauss = seq[offset + views :]
    return EncodedState(y_vis, cam, gauss)


def _camera_from_raw(raw: Tensor, prior: float, width: int, height: int) -> CameraTensors:
    q = normalize(raw[:, 0:4] + IDENTITY_QUAT, axis=-1)
    t = raw[:, 4:7]
    f = exp(raw[:, 7:9]) * prior
    return CameraTensors(q, t, f, width, height)


def camera_vectors(cams: CameraTensors, prior: float) -> Tensor:
    return concat([cams.q, cams.t, log(cams.f * (1.0 / prior))], axis=1)


def _cube_center(raw: Tensor, cfg: RunConfig) -> Tensor:
    return tanh(raw) * cfg.half_extent + np.array([0.0, 0.0, cfg.scene_depth])


def coarse_heads(params: ModelParams, state: EncodedState) -> tuple[CameraTensors, GeometricGaussians]:
    cfg = params.cfg
    cams = _camera_from_raw(_mlp(state.cam, params, "head.cam"), cfg.prior_focal, cfg.width, cfg.height)
    token_view = np.repeat(np.arange(cfg.views), cfg.n_gauss)
    cond = camera_vectors(cams, cfg.prior_focal)[token_view]
    raw = _mlp(concat([state.gauss, cond], axis=1), params, "head.gauss")
    geo = GeometricGaussians(
        mu=_cube_center(raw[:, 0:3], cfg),
        sigma=sigmoid(raw[:, 3]),
        r=normalize(raw[:, 4:8], axis=-1),
        s=clip(exp(raw[:, 8:11]), SCALE_MIN, SCALE_MAX),
        beta=softplus(raw[:, 11]),
    )
    return cams, geo


def decode(params: ModelParams, state: EncodedState, masks: MaskSet) -> DecodedState:
    """Refill every patch slot, hidden ones with the mask token, then run the decoder."""
    cfg = params.cfg
    n_p = cfg.n_patches
    pos = Tensor(_positions(params))
    grids: list[Tensor] = []
    mask_slots = 0
    for v, y in enumerate(state.y_vis):
        vis = masks.visible(v)
        if y.shape[0] != vis.size:
            raise ShapeError(f"view {v}: {y.shape[0]} encoded tokens for {vis.size} visible patches")
        keep = np.flatnonzero(~masks.dec_mask[v]) if masks.dec_mask else np.arange(vis.size)
        index = np.full(n_p, vis.size)
        index[vis[keep]] = keep
        mask_slots += int(np.sum(index == vis.size))
        src = concat([y, params["mask_token"]], axis=0)
        grids.append(src[index] + pos + params["view_embed"][v])

    seq = concat([*grids, state.cam, state.gauss], axis=0)
    seq = _run_blocks(seq, params, "dec", cfg.dec_depth)
    views = cfg.views
    out_grid = [seq[v * n_p : (v + 1) * n_p] for v in range(views)]
    base = views * n_p
    return DecodedState(out_grid, seq[base : base + views], seq[base + views :], mask_slots)


def _records(raw: Tensor, count: int, radius: float) -> Tensor:
    raw = raw.reshape(count, FANOUT, RECORD_DIM)
    offset = tanh(raw[:, :, 0:3]) * radius
    return concat([offset, raw[:, :, 3:]], axis=2)


def fine_heads(params: ModelParams, state: DecodedState) -> tuple[AnchorGaussians, Tensor, Tensor]:
    """Anchors plus the semantic and appearance fan-out records.

    Appearance records for semantic Gaussian ``k`` are read from its anchor's
    token plus a learned embedding of its fan-out slot.
    """
    cfg = params.cfg
    tokens = state.gauss
    n = tokens.shape[0]
    raw = _linear(tokens, params, "head.anchor")
    anchors = AnchorGaussians(
        mu=_cube_center(raw[:, 0:3], cfg),
        eps=raw[:, 3 : 3 + EPS_DIM],
        gamma=raw[:, 3 + EPS_DIM :],
    )
    sem_offsets = _records(_linear(tokens, params, "head.semantic"), n, cfg.offset_radius)

    parent = np.repeat(np.arange(n), FANOUT)
    slot = np.tile(np.arange(FANOUT), n)
    child = tokens[parent] + params["head.fanout_embed"][slot]
    app_offsets = _records(
        _linear(child, params, "head.appearance"), n * FANOUT, cfg.appearance_offset_radius
    )
    return anchors, sem_offsets, app_offsets


def point_and_camera_heads(
    params: ModelParams, state: DecodedState, coarse: CameraTensors
) -> tuple[Tensor, Tensor, CameraTensors]:
    cfg = params.cfg
    grid = patch_grid(cfg.height, cfg.width, cfg.patch_size)
    depth = np.array([0.0, 0.0, cfg.scene_depth])
    points, conf = [], []
    for z in state.grid:
        raw = unpatchify(_linear(z, params, "head.point"), grid, cfg.patch_size)
        points.append(raw[:, :, 0:3] + depth)
        conf.append(softplus(raw[:, :, 3]) + 1.0)

    raw_cam = _mlp(state.cam, params, "head.final_cam")
    delta_q = normalize(raw_cam[:, 0:4] + IDENTITY_QUAT, axis=-1)
    final = CameraTensors(
        quat_multiply_t(coarse.q, delta_q),
        coarse.t + raw_cam[:, 4:7],
        coarse.f * exp(raw_cam[:, 7:9]),
        coarse.width,
        coarse.height,
    )
    return stack(points), stack(conf), final


def coarse_importance(
    cams: CameraTensors, geo: GeometricGaussians, options: RasterOptions | None = None
) -> list[np.ndarray]:
    """Importance maps J rendered from the detached coarse field."""
    frozen = GeometricGaussians(
        geo.mu.detach(), geo.sigma.detach(), geo.r.detach(), geo.s.detach(), geo.beta.detach()
    )
    views = [
        (Tensor(cams.q.data[v]), Tensor(cams.t.data[v]), Tensor(cams.f.data[v]))
        for v in range(len(cams))
    ]
    maps = importance_for_masking(
        views,
        frozen,
        size=(cams.width, cams.height),
        options=options,
    )
    return [m.data for m in maps]


def forward(
    params: ModelParams,
    images: np.ndarray,
    *,
    step: int | None = None,
    masks: MaskSet | None = None,
    rho_e: float | None = None,
    rho_d: float | None = None,
    options: RasterOptions | None = None,
) -> NetworkOutput:
    """Run the whole pipeline on ``(V, H, W, 3)`` source images.

    Without ``masks`` the encoder mask is drawn from ``(seed, view, step)`` and
    the decoder mask is derived from the rendered importance. A ``masks``
    carrying a decoder mask is used as given.
    """
    cfg = params.cfg
    rho_e = cfg.rho_e if rho_e is None else rho_e
    rho_d = cfg.rho_d if rho_d is None else rho_d
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] != cfg.views:
        raise ShapeError(f"expected {cfg.views} source views, got {images.shape[0]}")
    tokens = tokenize(images, cfg.patch_size)
    grid = patch_grid(cfg.height, cfg.width, cfg.patch_size)
    if masks is None:
        masks = encoder_masks(cfg.views, cfg.n_patches, rho_e, cfg.seed, step)

    encoded = encode(params, tokens, masks)
    cams_coarse, geo = coarse_heads(params, encoded)
    importance = coarse_importance(cams_coarse, geo, options)
    if not masks.dec_mask:
        masks = with_geometry_masks(masks, importance, grid, cfg.patch_size, rho_d)

    decoded = decode(params, encoded, masks)
    anchors, sem_offsets, app_offsets = fine_heads(params, decoded)
    points, conf, cams_final = point_and_camera_heads(params, decoded, cams_coarse)
    return NetworkOutput(
        masks=masks,
        encoded=encoded,
        decoded=decoded,
        cams_coarse=cams_coarse,
        geo=geo,
        importance=importance,
        anchors=anchors,
        sem_offsets=sem_offsets,
        app_offsets=app_offsets,
        points=points,
        confidence=conf,
        cams_final=cams_final,
    )


def hierarchy(out: NetworkOutput, inherit_semantics: bool = False) -> tuple[RenderGaussians, RenderGaussians]:
    sems = expand_anchors_to_semantic(out.anchors, out.sem_offsets)
    apps = expand_semantic_to_appearance(sems, out.app_offsets, inherit_semantics)
    return sems, apps
