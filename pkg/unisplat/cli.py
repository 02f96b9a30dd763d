import json
import sys
from pathlib import Path
from typing import Any

from .checks import run_suite
from .errors import ConfigError, UniSplatError
from .formats import (
    atomic_write,
    gaussian_lines,
    load_checkpoint,
    load_config,
    masks_text,
    write_jsonl,
    write_plane,
    write_ppm,
    write_scene,
)
from .masking import mask_overlay
from .models import (
    CommandResult,
    EvalResult,
    FilesResult,
    GenSceneResult,
    GradCheckResult,
    RunConfig,
    TrainResult,
)
from .network import ModelParams, forward, init_params
from .training import FINAL_CHECKPOINT, evaluate, level_field, prepare, render_level, train

USAGE = (
    "Usage: unisplat gen-scene | train | render | mask-vis | eval | gradcheck "
    "[--config <path>] [--seed <n>] [--out <dir>] [--views <n>] [--steps <n>] "
    "[--checkpoint <path>] [--level anchor|semantic|appearance]"
)

FLAGS = ("--config", "--seed", "--out", "--views", "--steps", "--checkpoint", "--level")
LEVELS = ("anchor", "semantic", "appearance")

RESULTS: dict[str, type[CommandResult]] = {
    "gen-scene": GenSceneResult,
    "train": TrainResult,
    "render": FilesResult,
    "mask-vis": FilesResult,
    "eval": EvalResult,
    "gradcheck": GradCheckResult,
}


def parse_flags(args: list[str]) -> dict[str, str]:
    flags: dict[str, str] = {}
    i = 0
    while i < len(args):
        if args[i] not in FLAGS:
            raise ConfigError(f"unknown argument '{args[i]}'")
        if i + 1 >= len(args):
            raise ConfigError(f"{args[i]} needs a value")
        flags[args[i].removeprefix("--")] = args[i + 1]
        i += 2
    return flags


class UniSplatCLI:
    def __init__(self, flags: dict[str, str]) -> None:
        self.flags = flags
        self.out = Path(flags.get("out", "out"))

    def config(self) -> RunConfig:
        path = self.flags.get("config")
        overrides: dict[str, Any] = {
            "seed": self.flags.get("seed"),
            "views": self.flags.get("views"),
            "steps": self.flags.get("steps"),
        }
        return load_config(Path(path) if path else None, overrides)

    def params(self) -> ModelParams:
        path = self.flags.get("checkpoint")
        if path is None:
            raise ConfigError("--checkpoint is required")
        return load_checkpoint(Path(path))

    def gen_scene(self) -> GenSceneResult:
        cfg = self.config()
        scene, _ = prepare(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        scene_path = self.out / "scene.txt"
        write_scene(scene_path, scene)
        for v, img in enumerate(scene.images):
            write_ppm(self.out / f"view{v}.ppm", img)
        return GenSceneResult(
            success=True,
            error="",
            scene_path=str(scene_path),
            views=len(scene.cameras),
            primitives=len(scene.primitives),
        )

    def train(self) -> TrainResult:
        cfg = self.config()
        scene, teachers = prepare(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        write_scene(self.out / "scene.txt", scene)
        print(json.dumps({"status": "training", "steps": cfg.steps, "out": str(self.out)}), flush=True)
        _, reports = train(cfg, self.out, scene=scene, teachers=teachers)
        return TrainResult(
            success=True,
            error="",
            checkpoint=str(self.out / FINAL_CHECKPOINT),
            steps=cfg.steps,
            final_total=reports[-1].total if reports else None,
        )

    def render(self) -> FilesResult:
        params = self.params()
        level = self.flags.get("level", "appearance")
        if level not in LEVELS:
            raise ConfigError(f"--level must be one of {', '.join(LEVELS)}, got '{level}'")
        scene, _ = prepare(params.cfg)
        out, planes = render_level(params, scene.images[scene.source], level)
        self.out.mkdir(parents=True, exist_ok=True)
        files = []
        for v, maps in enumerate(planes):
            path = self.out / f"v{v}_rgb.ppm"
            write_ppm(path, maps["rgb"])
            files.append(path)
            for name in ("sem", "depth", "alpha", "importance"):
                path = self.out / f"v{v}_{name}.uspl"
                write_plane(path, maps[name])
                files.append(path)
        path = self.out / f"gaussians_{level}.txt"
        inherit = params.cfg.appearance_semantics == "inherit"
        atomic_write(path, gaussian_lines(level_field(out, level, inherit)))
        files.append(path)
        return FilesResult(success=True, error="", files=[str(p) for p in files])

    def mask_vis(self) -> FilesResult:
        if "checkpoint" in self.flags:
            params = self.params()
            cfg = params.cfg
        else:
            cfg = self.config()
            params = init_params(cfg)
        scene, _ = prepare(cfg)
        images = scene.images[scene.source]
        masks = forward(params, images).masks
        self.out.mkdir(parents=True, exist_ok=True)
        files = []
        for v, img in enumerate(images):
            path = self.out / f"mask_v{v}.ppm"
            write_ppm(path, mask_overlay(img, masks, v, cfg.grid, cfg.patch_size))
            files.append(path)
        path = self.out / "masks.txt"
        atomic_write(path, masks_text(masks))
        files.append(path)
        return FilesResult(success=True, error="", files=[str(p) for p in files])

    def eval(self) -> EvalResult:
        params = self.params()
        scene, teachers = prepare(params.cfg)
        reports = evaluate(params, scene, teachers)
        self.out.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.out / "metrics.jsonl", [r.model_dump() for r in reports])
        return EvalResult(success=True, error="", reports=reports)

    def gradcheck(self) -> GradCheckResult:
        seed = self.config().seed
        records = run_suite(seed)
        self.out.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.out / "gradcheck.jsonl", [r.model_dump() for r in records])
        failed = [r.check for r in records if not r.passed]
        return GradCheckResult(
            success=not failed,
            error=f"gradient checks failed: {', '.join(failed)}" if failed else "",
            checks=records,
        )


def _error(mode: str, msg: str) -> CommandResult:
    return RESULTS.get(mode, CommandResult)(success=False, error=msg)


def _run_cli(args: list[str]) -> int:
    if len(args) < 2:
        print(_error("", USAGE).model_dump_json())
        return 1

    mode = args[1]
    try:
        cli = UniSplatCLI(parse_flags(args[2:]))
        match mode:
            case "gen-scene":
                result: CommandResult = cli.gen_scene()
            case "train":
                result = cli.train()
            case "render":
                result = cli.render()
            case "mask-vis":
                result = cli.mask_vis()
            case "eval":
                result = cli.eval()
            case "gradcheck":
                result = cli.gradcheck()
            case _:
                print(_error(mode, f"Unknown mode: {mode}. {USAGE}").model_dump_json())
                return 1
    except UniSplatError as e:
        print(_error(mode, str(e)).model_dump_json())
        return 1

    print(result.model_dump_json())
    return 0 if result.success else 1


def main() -> None:
    sys.exit(_run_cli(sys.argv))
