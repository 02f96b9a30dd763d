"""Patch tokens and the two masking stages.

Stage 1 hides a random fraction of each view's patches before the encoder.
Stage 2 ranks the patches that survived Stage 1 by their pooled importance and
hides the top fraction before the decoder. Budgets round half up.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadPatchGrid, ConfigError, ShapeError
from .tensor import Tensor


def mask_budget(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 0.5))


def view_rng(seed: int, view: int, step: int | None = None) -> np.random.Generator:
    """Independent, reproducible stream per (seed, view), optionally per step."""
    entropy = [seed, view] if step is None else [seed, view, step]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    if patch <= 0 or height % patch or width % patch:
        raise BadPatchGrid(f"{height}x{width} image is not divisible into {patch}px patches")
    return height // patch, width // patch


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray
    patch_size: int
    grid: tuple[int, int]


def patchify(img: np.ndarray, patch: int) -> TokenGrid:
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    gh, gw = patch_grid(h, w, patch)
    tokens = (
        img.reshape(gh, patch, gw, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * c)
    )
    return TokenGrid(tokens, patch, (gh, gw))


def unpatchify(tokens: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    """Inverse of ``patchify`` on the tape: (N_p, p*p*C) -> (H, W, C)."""
    gh, gw = grid
    if tokens.shape[0] != gh * gw or tokens.shape[1] % (patch * patch):
        raise BadPatchGrid(f"cannot unpatchify {tokens.shape} onto a {gh}x{gw} grid of {patch}px")
    c = tokens.shape[1] // (patch * patch)
    return (
        tokens.reshape(gh, gw, patch, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * patch, gw * patch, c)
    )


def random_encoder_mask(
    n_p: int, rho_e: float, seed: int, view: int = 0, step: int | None = None
) -> np.ndarray:
    """Boolean mask over ``n_p`` patches, True = hidden."""
    if not 0.0 <= rho_e < 1.0:
        raise ConfigError(f"rho_e must lie in [0, 1), got {rho_e}")
    hidden = mask_budget(rho_e, n_p)
    noise = view_rng(seed, view, step).random(n_p)
    shuffle = np.argsort(noise, kind="stable")
    mask = np.zeros(n_p, dtype=bool)
    mask[shuffle[n_p - hidden :]] = True
    return mask


def pool_importance(importance: np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    importance = np.asarray(importance, dtype=np.float64)
    gh, gw = grid
    if importance.shape != (gh * patch, gw * patch):
        raise ShapeError(
            f"importance map {importance.shape} does not match a {gh}x{gw} grid of {patch}px"
        )
    return importance.reshape(gh, patch, gw, patch).mean(axis=(1, 3)).reshape(-1)


def geometry_mask(scores: np.ndarray, visible: np.ndarray, rho_d: float) -> np.ndarray:
    """Mask over the ``visible`` positions hiding the highest-scoring fraction.

    Ties go to the lower patch index.
    """
    if not 0.0 <= rho_d < 1.0:
        raise ConfigError(f"rho_d must lie in [0, 1), got {rho_d}")
    visible = np.asarray(visible, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    ranked = np.lexsort((visible, -scores[visible]))
    mask = np.zeros(visible.size, dtype=bool)
    mask[ranked[: mask_budget(rho_d, visible.size)]] = True
    return mask


@dataclass
class MaskSet:
    enc_mask: np.ndarray
    dec_mask: list[np.ndarray] = field(default_factory=list)
    rho_e: float = 0.0
    rho_d: float = 0.0

    @property
    def views(self) -> int:
        return self.enc_mask.shape[0]

    def visible(self, view: int) -> np.ndarray:
        return np.flatnonzero(~self.enc_mask[view])

    def surviving(self, view: int) -> np.ndarray:
        vis = self.visible(view)
        if not self.dec_mask:
            return vis
        return vis[~self.dec_mask[view]]

    def decoder_hidden(self, view: int) -> np.ndarray:
        if not self.dec_mask:
            return np.zeros(0, dtype=np.int64)
        return self.visible(view)[self.dec_mask[view]]

    def hidden(self, view: int) -> np.ndarray:
        """Patches hidden by either stage, as a boolean mask over the grid."""
        out = self.enc_mask[view].copy()
        out[self.decoder_hidden(view)] = True
        return out


def encoder_masks(
    views: int, n_p: int, rho_e: float, seed: int, step: int | None = None
) -> MaskSet:
    enc = np.stack([random_encoder_mask(n_p, rho_e, seed, v, step) for v in range(views)])
    return MaskSet(enc_mask=enc, rho_e=rho_e)


def with_geometry_masks(
    masks: MaskSet, importance: list[np.ndarray], grid: tuple[int, int], patch: int, rho_d: float
) -> MaskSet:
    dec = [
        geometry_mask(pool_importance(imp, grid, patch), masks.visible(v), rho_d)
        for v, imp in enumerate(importance)
    ]
    return MaskSet(enc_mask=masks.enc_mask, dec_mask=dec, rho_e=masks.rho_e, rho_d=rho_d)


def mask_bitstring(masks: MaskSet, view: int) -> str:
    return "".join("1" if h else "0" for h in masks.hidden(view))


def mask_overlay(
    img: np.ndarray, masks: MaskSet, view: int, grid: tuple[int, int], patch: int
) -> np.ndarray:
    """Dim hidden patches to 30%; decoder-hidden ones are also tinted red."""
    out = np.asarray(img, dtype=np.float64).copy()
    gw = grid[1]
    dec_hidden = set(masks.decoder_hidden(view).tolist())
    for k in np.flatnonzero(masks.hidden(view)):
        row, col = divmod(int(k), gw)
        tile = out[row * patch : (row + 1) * patch, col * patch : (col + 1) * patch]
        tile *= 0.3
        if k in dec_hidden:
            tile[..., 0] += 0.5
    return np.clip(out, 0.0, 1.0)
