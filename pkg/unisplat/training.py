"""The training loop, held-out evaluation and checkpoint rendering.

Pose and point losses compare canonicalized predictions against canonicalized
teachers: both are re-expressed in the frame of their own camera 0. Rendering
happens in the network's own frame.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import (
    CameraParams,
    CameraTensors,
    canonicalize_poses,
    canonicalize_tensors,
    quat_multiply,
    quat_to_rotmat,
    relative_pose,
    relative_rotation_error,
)
from .formats import append_jsonl, save_checkpoint
from .gaussians import RenderGaussians, anchor_field
from .masking import MaskSet
from .metrics import (
    decode_semantics,
    depth_scores,
    pairwise_rotation_errors,
    pose_aucs,
    psnr,
    segmentation_scores,
    ssim_score,
)
from .models import LossReport, MetricsReport, RunConfig
from .network import ModelParams, NetworkOutput, forward, hierarchy, init_params
from .objectives import (
    Reduction,
    loss_geo,
    loss_recalib,
    loss_rgb,
    loss_sem,
    total_loss,
    weighted_total,
)
from .optim import OptimState, adamw_step, zero_grads
from .rasterizer import Camera, RasterOptions, render
from .scene import OracleTeachers, SyntheticScene, gen_scene, make_teachers
from .tensor import Tensor, stack

LOSS_LOG = "losses.jsonl"
FINAL_CHECKPOINT = "checkpoint.bin"


@dataclass
class StepOutput:
    loss: Tensor
    terms: dict[str, Tensor]
    report: LossReport
    out: NetworkOutput


@dataclass
class Renders:
    rgb: Tensor
    sem: Tensor
    depth: np.ndarray
    alpha: np.ndarray


def prepare(cfg: RunConfig) -> tuple[SyntheticScene, OracleTeachers]:
    scene = gen_scene(cfg)
    return scene, make_teachers(scene, cfg.teacher_rot_noise_deg, cfg.teacher_trans_noise)


def render_views(
    cams: CameraTensors | list[CameraParams],
    sems: RenderGaussians,
    apps: RenderGaussians,
    options: RasterOptions | None = None,
) -> Renders:
    """Semantics from the semantic level, colour and depth from the appearance level."""
    rgb, sem, depth, alpha = [], [], [], []
    for v in range(len(cams)):
        if isinstance(cams, CameraTensors):
            cam: Camera = cams.view(v)
            size: tuple[int, int] | None = (cams.width, cams.height)
        else:
            cam, size = cams[v], None
        color = render(cam, apps, ("rgb",), size=size, options=options)
        feats = render(cam, sems, ("sem",), size=size, options=options)
        assert color.rgb is not None and feats.sem is not None
        rgb.append(color.rgb)
        sem.append(feats.sem)
        depth.append(color.depth.data)
        alpha.append(color.alpha.data)
    return Renders(stack(rgb), stack(sem), np.stack(depth), np.stack(alpha))


def _canonical_points(points: np.ndarray, cams: list[CameraParams]) -> np.ndarray:
    ref = cams[0]
    return points @ ref.rotation.T + ref.t


def compute_losses(
    params: ModelParams,
    images: np.ndarray,
    teachers: OracleTeachers,
    *,
    step: int | None = None,
    masks: MaskSet | None = None,
    options: RasterOptions | None = None,
    reduction: Reduction = "mean",
) -> StepOutput:
    cfg = params.cfg
    out = forward(params, images, step=step, masks=masks, options=options)
    sems, apps = hierarchy(out, cfg.appearance_semantics == "inherit")
    maps = render_views(out.cams_final, sems, apps, options)

    canon, r0, t0 = canonicalize_tensors(out.cams_final)
    teacher_cams = canonicalize_poses(teachers.cameras)
    shape = out.points.shape
    points = (out.points.reshape(-1, 3) @ r0.transpose(1, 0) + t0).reshape(*shape)
    teacher_points = _canonical_points(teachers.points, teachers.cameras)

    pose, point = loss_geo(
        canon, teacher_cams, points, out.confidence, teacher_points, teachers.confidence, reduction
    )
    recalib_geo, recalib_sem = loss_recalib(maps.rgb, maps.sem, points, canon, reduction)
    terms = {
        "rgb": loss_rgb(maps.rgb, images, cfg.lambda_ssim),
        "sem": loss_sem(maps.sem, teachers.features, reduction),
        "pose": pose,
        "point": point,
        "recalib_geo": recalib_geo,
        "recalib_sem": recalib_sem,
    }
    report = total_loss(
        **{name: t.item() for name, t in terms.items()},
        lambda_pose=cfg.lambda_pose,
        lambda_point=cfg.lambda_point,
        step=step,
    )
    loss = weighted_total(terms, cfg.lambda_pose, cfg.lambda_point)
    return StepOutput(loss, terms, report, out)


def optimizer_for(cfg: RunConfig) -> OptimState:
    return OptimState(
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def train(
    cfg: RunConfig,
    out_dir: Path,
    *,
    scene: SyntheticScene | None = None,
    teachers: OracleTeachers | None = None,
    options: RasterOptions | None = None,
) -> tuple[ModelParams, list[LossReport]]:
    """Optimize a fresh model on the source views for ``cfg.steps`` steps.

    Writes ``losses.jsonl``, periodic ``checkpoint-<step>.bin`` files and a
    final ``checkpoint.bin``.
    """
    if scene is None or teachers is None:
        scene, teachers = prepare(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOSS_LOG
    log_path.write_text("", encoding="utf-8")

    params = init_params(cfg)
    state = optimizer_for(cfg)
    images = scene.images[scene.source]
    reports: list[LossReport] = []
    for step in range(1, cfg.steps + 1):
        zero_grads(params.tensors)
        result = compute_losses(params, images, teachers, step=step, options=options)
        result.loss.backward()
        adamw_step(params.tensors, state, step)
        reports.append(result.report)
        append_jsonl(log_path, result.report.log_line(step))
        if step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint-{step:06d}.bin", params)
            print(
                json.dumps({"status": "checkpoint", "step": step, "total": result.report.total}),
                flush=True,
            )

    save_checkpoint(out_dir / FINAL_CHECKPOINT, params)
    return params, reports


def heldout_cameras(pred: list[CameraParams], scene: SyntheticScene) -> list[CameraParams]:
    """Place held-out views in the predicted frame via predicted camera 0."""
    ref_gt = scene.cameras[0]
    ref = pred[0]
    out = []
    for gt in scene.cameras[scene.heldout]:
        rel = relative_pose(ref_gt, gt)
        q = quat_multiply(rel.q, ref.q)
        t = quat_to_rotmat(rel.q) @ ref.t + rel.t
        out.append(CameraParams(q, t, ref.f, ref.width, ref.height))
    return out


def heldout_rotation_errors(
    params: ModelParams, scene: SyntheticScene, options: RasterOptions | None = None
) -> np.ndarray:
    """Relative-rotation errors between each held-out view and the source views.

    Each held-out image takes the last input slot in an unmasked forward pass;
    its predicted camera is compared with the other source cameras.
    """
    src = scene.images[scene.source]
    gt_src = scene.cameras[scene.source][:-1]
    errs = []
    for img, gt in zip(scene.images[scene.heldout], scene.cameras[scene.heldout], strict=True):
        images = np.concatenate([src[:-1], img[None]])
        out = forward(params, images, rho_e=0.0, rho_d=0.0, options=options)
        pred = out.cams_final.to_params()
        errs.extend(
            relative_rotation_error(relative_pose(p, pred[-1]), relative_pose(g, gt))
            for p, g in zip(pred[:-1], gt_src, strict=True)
        )
    return np.asarray(errs)


def _report(
    split: str,
    maps: Renders,
    images: np.ndarray,
    labels: np.ndarray,
    depth: np.ndarray,
    codes: np.ndarray,
    rotation_errors: np.ndarray | None = None,
) -> MetricsReport:
    rgb = maps.rgb.data
    views = rgb.shape[0]
    pred_labels = decode_semantics(maps.sem.data, codes)
    miou, pix_acc = segmentation_scores(pred_labels, labels)
    scores = depth_scores(maps.depth, maps.alpha, depth)
    aucs = pose_aucs(rotation_errors) if rotation_errors is not None and rotation_errors.size else {}
    return MetricsReport(
        split=split,
        psnr=float(np.mean([psnr(rgb[v], images[v]) for v in range(views)])),
        ssim=float(np.mean([ssim_score(rgb[v], images[v]) for v in range(views)])),
        miou=miou,
        pix_acc=pix_acc,
        abs_rel=scores[0] if scores else None,
        abs_rel_pct=100.0 * scores[0] if scores else None,
        tau_inlier=scores[1] if scores else None,
        pose_auc_5=aucs.get(5),
        pose_auc_10=aucs.get(10),
        pose_auc_20=aucs.get(20),
    )


def evaluate(
    params: ModelParams,
    scene: SyntheticScene,
    teachers: OracleTeachers,
    options: RasterOptions | None = None,
) -> list[MetricsReport]:
    """Metrics on the source views and, when the scene has them, the held-out views.

    Inference runs without masking. Pose AUC on the held-out split compares
    each held-out view against the source views.
    """
    src = scene.source
    out = forward(params, scene.images[src], rho_e=0.0, rho_d=0.0, options=options)
    sems, apps = hierarchy(out, params.cfg.appearance_semantics == "inherit")
    sems, apps = sems.detach(), apps.detach()
    pred = out.cams_final.to_params()
    codes = teachers.class_codes

    reports = [
        _report(
            "source",
            render_views(pred, sems, apps, options),
            scene.images[src],
            scene.labels[src],
            scene.depth[src],
            codes,
            pairwise_rotation_errors(pred, scene.cameras[src]),
        )
    ]
    held = scene.cameras[scene.heldout]
    if held:
        reports.append(
            _report(
                "heldout",
                render_views(heldout_cameras(pred, scene), sems, apps, options),
                scene.images[scene.heldout],
                scene.labels[scene.heldout],
                scene.depth[scene.heldout],
                codes,
                heldout_rotation_errors(params, scene, options),
            )
        )
    return reports


def level_field(out: NetworkOutput, level: str, inherit: bool = False) -> RenderGaussians:
    if level == "anchor":
        return anchor_field(out.anchors).detach()
    sems, apps = hierarchy(out, inherit)
    return (sems if level == "semantic" else apps).detach()


def render_level(
    params: ModelParams, images: np.ndarray, level: str, options: RasterOptions | None = None
) -> tuple[NetworkOutput, list[dict[str, np.ndarray]]]:
    """Unmasked forward pass and per-view rgb, sem, depth, alpha planes of one level."""
    out = forward(params, images, rho_e=0.0, rho_d=0.0, options=options)
    fld = level_field(out, level, params.cfg.appearance_semantics == "inherit")
    planes = []
    for v, cam in enumerate(out.cams_final.to_params()):
        maps = render(cam, fld, ("rgb", "sem"), options=options)
        assert maps.rgb is not None and maps.sem is not None
        planes.append(
            {
                "rgb": maps.rgb.data,
                "sem": maps.sem.data,
                "depth": maps.depth.data,
                "alpha": maps.alpha.data,
                "importance": out.importance[v],
            }
        )
    return out, planes
