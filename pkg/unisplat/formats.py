"""On-disk formats: run configs, scenes, Gaussian fields, renders, checkpoints, logs."""

import os
import re
import struct
import tempfile
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import ndjson
import numpy as np
from pydantic import ValidationError

from .camera import CameraParams
from .constants import CHECKPOINT_MAGIC, PLANE_MAGIC, SEM_DIM
from .errors import CheckpointError, ConfigError, SceneError
from .gaussians import RenderGaussians
from .masking import MaskSet, mask_bitstring
from .models import RunConfig
from .network import ModelParams, init_params
from .scene import Primitive, SyntheticScene, render_views
from .tensor import parameter

PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def atomic_write(path: Path, content: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb" if isinstance(content, bytes) else "w") as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(x)) for x in values)


def _floats(tokens: list[str], where: str) -> list[float]:
    try:
        return [float(x) for x in tokens]
    except ValueError as e:
        raise SceneError(f"{where}: {e}") from e


# configs


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = value
    return values


def build_config(values: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(problems) from e


def load_config(path: Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values.update(parse_config_text(path.read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def config_text(cfg: RunConfig) -> str:
    return "".join(
        f"{key} = {value}\n"
        for key, value in cfg.model_dump(exclude_none=True).items()
    )


# cameras and scenes


def camera_line(cam: CameraParams) -> str:
    return f"cam {_fmt(cam.vector())}"


def parse_camera_line(line: str, width: int, height: int) -> CameraParams:
    parts = line.split()
    if len(parts) != 10 or parts[0] != "cam":
        raise SceneError(f"malformed camera line: {line!r}")
    return CameraParams.from_vector(_floats(parts[1:], "cam"), width, height)


def primitive_line(prim: Primitive) -> str:
    return f"prim {prim.kind} {_fmt((*prim.center, *prim.size, *prim.color))} {prim.class_id}"


def parse_primitive_line(line: str) -> Primitive:
    parts = line.split()
    if len(parts) < 3 or parts[0] != "prim":
        raise SceneError(f"malformed primitive line: {line!r}")
    kind = parts[1]
    sizes = {"sphere": 1, "box": 3}
    if kind not in sizes:
        raise SceneError(f"unknown primitive kind '{kind}'")
    n = sizes[kind]
    if len(parts) != 2 + 3 + n + 3 + 1:
        raise SceneError(f"{kind} needs {3 + n + 3 + 1} values, got {len(parts) - 2}")
    vals = _floats(parts[2:-1], f"prim {kind}")
    try:
        class_id = int(parts[-1])
    except ValueError as e:
        raise SceneError(f"prim {kind}: bad class id {parts[-1]!r}") from e
    return Primitive(kind, tuple(vals[0:3]), tuple(vals[3 : 3 + n]), tuple(vals[3 + n :]), class_id)  # type: ignore[arg-type]


def scene_text(scene: SyntheticScene) -> str:
    cfg = scene.cfg
    lines = [
        f"scene {cfg.width} {cfg.height} {cfg.classes} {cfg.views} {cfg.heldout_views} {scene.seed}",
        *(camera_line(c) for c in scene.cameras),
        *(primitive_line(p) for p in scene.primitives),
    ]
    return "\n".join(lines) + "\n"


def write_scene(path: Path, scene: SyntheticScene) -> None:
    atomic_write(path, scene_text(scene))


def read_scene(path: Path, cfg: RunConfig | None = None) -> SyntheticScene:
    """Parse a scene file and re-render its ground truth with the ray caster."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SceneError(f"cannot read scene {path}: {e.strerror}") from e
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("scene "):
        raise SceneError(f"{path}: missing 'scene' header")
    header = lines[0].split()
    if len(header) != 7:
        raise SceneError(f"{path}: malformed header {lines[0]!r}")
    width, height, classes, views, heldout, seed = (int(x) for x in header[1:])
    base = cfg or RunConfig()
    cfg = build_config(
        {
            **base.model_dump(),
            "width": width,
            "height": height,
            "classes": classes,
            "views": views,
            "heldout_views": heldout,
            "seed": seed,
        }
    )
    cams = [parse_camera_line(ln, width, height) for ln in lines[1:] if ln.startswith("cam ")]
    prims = [parse_primitive_line(ln) for ln in lines[1:] if ln.startswith("prim ")]
    if len(cams) != views + heldout:
        raise SceneError(f"{path}: header promises {views + heldout} cameras, found {len(cams)}")
    bad = [p.class_id for p in prims if not 0 <= p.class_id < classes]
    if bad:
        raise SceneError(f"{path}: class ids {bad} outside [0, {classes})")
    images, depth, labels = render_views(cams, prims, classes)
    return SyntheticScene(cfg, cams, prims, images, depth, labels, seed)


# Gaussian fields


def gaussian_lines(fld: RenderGaussians) -> str:
    out = []
    for i in range(len(fld)):
        values = [
            *fld.center.data[i],
            fld.sigma.data[i],
            *fld.r.data[i],
            *fld.s.data[i],
            *fld.color.data[i],
            *fld.gamma.data[i],
        ]
        out.append(f"g {fld.level} {_fmt(values)}")
    return "\n".join(out) + ("\n" if out else "")


def parse_gaussian_line(line: str) -> tuple[str, np.ndarray]:
    """Level name and the flat 14 or 78 attribute values of one ``g`` line."""
    parts = line.split()
    if len(parts) < 2 or parts[0] != "g" or len(parts) - 2 not in (14, 14 + SEM_DIM):
        raise SceneError(f"malformed Gaussian line: {line[:60]!r}")
    return parts[1], np.array(_floats(parts[2:], "g"))


# renders


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    height, width = rgb.shape[:2]
    pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    atomic_write(path, ppm_bytes(rgb))


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    header = PPM_HEADER.match(data)
    if header is None:
        raise SceneError(f"{path}: not a binary PPM")
    width, height = int(header[1]), int(header[2])
    body = data[header.end() :]
    if len(body) < width * height * 3:
        raise SceneError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body[: width * height * 3], dtype=np.uint8)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def plane_bytes(plane: np.ndarray) -> bytes:
    plane = np.asarray(plane)
    if plane.ndim == 2:
        plane = plane[:, :, None]
    height, width, channels = plane.shape
    header = PLANE_MAGIC + struct.pack("<III", height, width, channels)
    return header + plane.astype("<f4").tobytes()


def write_plane(path: Path, plane: np.ndarray) -> None:
    atomic_write(path, plane_bytes(plane))


def read_plane(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:4] != PLANE_MAGIC or len(data) < 16:
        raise SceneError(f"{path}: not a float plane")
    height, width, channels = struct.unpack("<III", data[4:16])
    values = np.frombuffer(data[16:], dtype="<f4")
    if values.size != height * width * channels:
        raise SceneError(f"{path}: expected {height * width * channels} floats, found {values.size}")
    return values.reshape(height, width, channels).astype(np.float64)


def masks_text(masks: MaskSet) -> str:
    return "".join(f"v{v}: {mask_bitstring(masks, v)}\n" for v in range(masks.views))


# checkpoints


def checkpoint_bytes(params: ModelParams) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.tensors))]
    for name, tensor in params.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(tensor.data.astype("<f4").tobytes())
    chunks.append(config_text(params.cfg).encode("utf-8"))
    return b"".join(chunks)


def save_checkpoint(path: Path, params: ModelParams) -> None:
    atomic_write(path, checkpoint_bytes(params))


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path: Path) -> ModelParams:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    reader = _Reader(data, path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint header")
    (count,) = reader.u32()
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.u32()
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.u32()
        shape = reader.u32(ndim)
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
    try:
        cfg = build_config(parse_config_text(data[reader.pos :].decode("utf-8")))
    except ConfigError as e:
        raise CheckpointError(f"{path}: bad config block: {e}") from e

    params = init_params(cfg)
    missing = sorted(set(params.tensors) - set(records))
    extra = sorted(set(records) - set(params.tensors))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, ref in params.tensors.items():
        if records[name].shape != ref.shape:
            raise CheckpointError(f"{path}: '{name}' has shape {records[name].shape}, expected {ref.shape}")
        params.tensors[name] = parameter(records[name].astype(np.float64), name)
    return params


# JSON-lines logs


def write_jsonl(path: Path, rows: list[dict[str, Any]]) -> None:
    atomic_write(path, ndjson.dumps(rows) + ("\n" if rows else ""))


def append_jsonl(path: Path, row: dict[str, Any]) -> None:
    with path.open("a", encoding="utf-8") as f:
        ndjson.writer(f).writerow(row)


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with path.open(encoding="utf-8") as f:
        return ndjson.load(f)
