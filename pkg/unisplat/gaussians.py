"""Gaussian fields at the three hierarchy levels and the 10x fan-out between them.

An anchor spawns ``FANOUT`` semantic Gaussians, and each semantic Gaussian
spawns ``FANOUT`` appearance Gaussians. Output order is parent-major, child
index minor. A fan-out record is ``RECORD_DIM`` wide: a 3-vector offset
(already scaled by the predicting head), the 11 geometric raws and the 64
semantic features.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .constants import EPS_DIM, FANOUT, RECORD_DIM, SCALE_MAX, SCALE_MIN, SEM_DIM
from .errors import DegenerateRotation, FanOutMismatch, NonFiniteInput, ShapeError
from .tensor import Tensor, as_tensor, clip, exp, normalize, sigmoid

Level = Literal["anchor", "semantic", "appearance"]

ROTATION_EPS = 1e-12


@dataclass
class GeometricGaussians:
    """Coarse field used only for the importance map."""

    mu: Tensor
    sigma: Tensor
    r: Tensor
    s: Tensor
    beta: Tensor

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass
class AnchorGaussians:
    mu: Tensor
    eps: Tensor
    gamma: Tensor

    def __post_init__(self) -> None:
        if self.eps.shape[-1] != EPS_DIM or self.gamma.shape[-1] != SEM_DIM:
            raise ShapeError(
                f"anchor features must be {EPS_DIM}+{SEM_DIM} wide, "
                f"got {self.eps.shape[-1]}+{self.gamma.shape[-1]}"
            )

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass
class RenderGaussians:
    center: Tensor
    color: Tensor
    sigma: Tensor
    r: Tensor
    s: Tensor
    gamma: Tensor
    level: Level

    def __len__(self) -> int:
        return self.center.shape[0]

    def detach(self) -> "RenderGaussians":
        return RenderGaussians(
            self.center.detach(),
            self.color.detach(),
            self.sigma.detach(),
            self.r.detach(),
            self.s.detach(),
            self.gamma.detach(),
            self.level,
        )


def unpack_geometric_feature(eps: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split ``(..., 11)`` raws into opacity, rotation, scale and color."""
    eps = as_tensor(eps)
    if eps.shape[-1] != EPS_DIM:
        raise ShapeError(f"geometric feature must be {EPS_DIM} wide, got {eps.shape[-1]}")
    if not np.all(np.isfinite(eps.data)):
        raise NonFiniteInput("geometric feature contains non-finite values")
    raw_r = eps[..., 1:5]
    if np.any(np.linalg.norm(raw_r.data, axis=-1) < ROTATION_EPS):
        raise DegenerateRotation("rotation slice of a geometric feature has zero norm")
    sigma = sigmoid(eps[..., 0])
    r = normalize(raw_r, axis=-1)
    s = clip(exp(eps[..., 5:8]), SCALE_MIN, SCALE_MAX)
    color = sigmoid(eps[..., 8:11])
    return sigma, r, s, color


def _check_records(offsets: Tensor, parents: int) -> None:
    if offsets.ndim != 3 or offsets.shape[0] != parents or offsets.shape[1] != FANOUT:
        raise FanOutMismatch(
            f"expected ({parents}, {FANOUT}, {RECORD_DIM}) fan-out records, got {offsets.shape}"
        )
    if offsets.shape[2] != RECORD_DIM:
        raise ShapeError(f"fan-out records must be {RECORD_DIM} wide, got {offsets.shape[2]}")


def _expand(
    base: Tensor, offsets: Tensor, level: Level, gamma: Tensor | None = None
) -> RenderGaussians:
    n = base.shape[0]
    flat = offsets.reshape(n * FANOUT, RECORD_DIM)
    parent = np.repeat(np.arange(n), FANOUT)
    center = base[parent] + flat[:, 0:3]
    sigma, r, s, color = unpack_geometric_feature(flat[:, 3 : 3 + EPS_DIM])
    if gamma is None:
        gamma = flat[:, 3 + EPS_DIM :]
    else:
        gamma = gamma[parent]
    return RenderGaussians(center, color, sigma, r, s, gamma, level)


def expand_anchors_to_semantic(anchors: AnchorGaussians, offsets: Tensor) -> RenderGaussians:
    offsets = as_tensor(offsets)
    _check_records(offsets, len(anchors))
    return _expand(anchors.mu, offsets, "semantic")


def expand_semantic_to_appearance(
    sems: RenderGaussians, offsets: Tensor, inherit_semantics: bool = False
) -> RenderGaussians:
    offsets = as_tensor(offsets)
    _check_records(offsets, len(sems))
    return _expand(
        sems.center, offsets, "appearance", sems.gamma if inherit_semantics else None
    )


def anchor_field(anchors: AnchorGaussians) -> RenderGaussians:
    """Renderable view of the anchors themselves, attributes decoded from eps."""
    sigma, r, s, color = unpack_geometric_feature(anchors.eps)
    return RenderGaussians(anchors.mu, color, sigma, r, s, anchors.gamma, "anchor")


def field_from_arrays(
    center: np.ndarray,
    color: np.ndarray,
    sigma: np.ndarray,
    r: np.ndarray,
    s: np.ndarray,
    gamma: np.ndarray | None = None,
    level: Level = "appearance",
) -> RenderGaussians:
    center = np.asarray(center, dtype=np.float64).reshape(-1, 3)
    n = center.shape[0]
    if gamma is None:
        gamma = np.zeros((n, SEM_DIM))
    return RenderGaussians(
        Tensor(center),
        Tensor(np.asarray(color, dtype=np.float64).reshape(n, 3)),
        Tensor(np.asarray(sigma, dtype=np.float64).reshape(n)),
        Tensor(np.asarray(r, dtype=np.float64).reshape(n, 4)),
        Tensor(np.asarray(s, dtype=np.float64).reshape(n, 3)),
        Tensor(np.asarray(gamma, dtype=np.float64).reshape(n, -1)),
        level,
    )
