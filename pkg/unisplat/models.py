import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class RunConfig(BaseModel):
    seed: int = Field(default=0, ge=0)

    views: int = Field(default=4, ge=1)
    heldout_views: int = Field(default=1, ge=0)
    width: int = Field(default=64, gt=0)
    height: int = Field(default=64, gt=0)
    classes: int = Field(default=4, ge=1)
    primitives: int = Field(default=6, ge=1)
    fov_deg: float = Field(default=60.0, gt=0.0, lt=180.0)
    camera_distance: float = Field(default=2.5, gt=0.0)
    arc_deg: float = Field(default=60.0, ge=0.0)
    camera_jitter: float = Field(default=0.05, ge=0.0)
    teacher_rot_noise_deg: float = Field(default=0.0, ge=0.0)
    teacher_trans_noise: float = Field(default=0.0, ge=0.0)

    patch_size: int = Field(default=8, gt=0)
    dim: int = Field(default=64, gt=0)
    heads: int = Field(default=4, gt=0)
    enc_depth: int = Field(default=4, ge=0)
    dec_depth: int = Field(default=2, ge=0)
    ffn_mult: int = Field(default=2, gt=0)
    n_gauss: int = Field(default=256, gt=0)
    init_std: float = Field(default=0.02, ge=0.0)

    rho_e: float = Field(default=0.5, ge=0.0, lt=1.0)
    rho_d: float = Field(default=0.5, ge=0.0, lt=1.0)

    scene_depth: float = 2.5
    half_extent: float = Field(default=1.5, gt=0.0)
    offset_radius: float = Field(default=0.2, gt=0.0)
    appearance_offset_radius: float = Field(default=0.05, gt=0.0)
    scale_init: float = Field(default=0.05, gt=0.0)
    focal_prior: float | None = Field(default=None, gt=0.0)
    appearance_semantics: Literal["fresh", "inherit"] = "fresh"

    lr: float = Field(default=1e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)

    lambda_pose: float = Field(default=10.0, ge=0.0)
    lambda_point: float = Field(default=1.0, ge=0.0)
    lambda_ssim: float = Field(default=0.2, ge=0.0)

    steps: int = Field(default=1000, ge=0)
    checkpoint_every: int = Field(default=500, gt=0)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_dims(self) -> "RunConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.dim % 4:
            raise ValueError(f"dim={self.dim} must be divisible by 4 for 2D position codes")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"{self.height}x{self.width} image is not divisible into {self.patch_size}px patches"
            )
        return self

    @property
    def prior_focal(self) -> float:
        if self.focal_prior is not None:
            return self.focal_prior
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


class LossReport(BaseModel):
    rgb: float = Field(ge=0.0)
    sem: float = Field(ge=0.0)
    pose: float = Field(ge=0.0)
    point: float = Field(ge=0.0)
    recalib_geo: float = Field(ge=0.0)
    recalib_sem: float = Field(ge=0.0)
    total: float = Field(ge=0.0)
    lambda_pose: float = 10.0
    lambda_point: float = 1.0

    model_config = ConfigDict(extra="forbid")

    def log_line(self, step: int) -> dict[str, float | int]:
        return {
            "step": step,
            "rgb": self.rgb,
            "sem": self.sem,
            "pose": self.pose,
            "point": self.point,
            "recalib_geo": self.recalib_geo,
            "recalib_sem": self.recalib_sem,
            "total": self.total,
        }


class MetricsReport(BaseModel):
    split: str
    psnr: float = Field(ge=0.0)
    ssim: float = Field(ge=-1.0, le=1.0)
    miou: float = Field(ge=0.0, le=1.0)
    pix_acc: float = Field(ge=0.0, le=1.0)
    abs_rel: float | None = None
    abs_rel_pct: float | None = None
    tau_inlier: float | None = Field(default=None, ge=0.0, le=1.0)
    pose_auc_5: float | None = Field(default=None, ge=0.0, le=1.0)
    pose_auc_10: float | None = Field(default=None, ge=0.0, le=1.0)
    pose_auc_20: float | None = Field(default=None, ge=0.0, le=1.0)

    model_config = ConfigDict(extra="forbid")


class GradCheckRecord(BaseModel):
    check: str
    max_rel_error: float
    param: str = ""
    index: list[int] = Field(default_factory=list)
    tolerance: float
    passed: bool

    model_config = ConfigDict(extra="forbid")


class CommandResult(BaseModel):
    success: bool
    error: str

    model_config = ConfigDict(extra="forbid")


class GenSceneResult(CommandResult):
    scene_path: str = ""
    views: int = 0
    primitives: int = 0

    model_config = ConfigDict(extra="forbid")


class TrainResult(CommandResult):
    checkpoint: str = ""
    steps: int = 0
    final_total: float | None = None

    model_config = ConfigDict(extra="forbid")


class FilesResult(CommandResult):
    files: list[str] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")


class EvalResult(CommandResult):
    reports: list[MetricsReport] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")


class GradCheckResult(CommandResult):
    checks: list[GradCheckRecord] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")
