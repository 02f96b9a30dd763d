import struct

import numpy as np
import pytest

from unisplat.errors import CheckpointError, ConfigError, SceneError
from unisplat.formats import (
    append_jsonl,
    atomic_write,
    checkpoint_bytes,
    config_text,
    gaussian_lines,
    load_checkpoint,
    load_config,
    masks_text,
    parse_config_text,
    parse_gaussian_line,
    parse_primitive_line,
    read_jsonl,
    read_plane,
    read_ppm,
    read_scene,
    save_checkpoint,
    scene_text,
    write_jsonl,
    write_plane,
    write_ppm,
)
from unisplat.gaussians import field_from_arrays
from unisplat.masking import MaskSet
from unisplat.network import init_params


def test_parse_config_text():
    values = parse_config_text("# comment\nseed = 4  # trailing\n\nviews=3\n")
    assert values == {"seed": "4", "views": "3"}


@pytest.mark.parametrize("text", ["seed 4\n", "= 4\n", "seed = 1\nseed = 2\n"])
def test_parse_config_text_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_parse_config_fixture_text(fixture_text):
    values = parse_config_text(fixture_text("tiny.conf"))
    assert values["n_gauss"] == "2"
    assert values["init_std"] == "0.1"
    assert len(values) == 16


def test_load_config_fixture(fixture_path):
    cfg = load_config(fixture_path("tiny.conf"))
    assert cfg.seed == 3
    assert cfg.grid == (2, 2)
    assert cfg.n_patches == 4


NAMED_CONFIGS = {
    "default": {"views": 4, "dim": 64, "n_gauss": 256, "lr": 1e-4, "rho_e": 0.5, "rho_d": 0.5},
    "desk-overfit": {"views": 4, "width": 64, "classes": 4, "steps": 5000, "lr": 1e-4, "lambda_pose": 10.0},
}


@pytest.mark.parametrize("name", NAMED_CONFIGS.keys())
def test_named_configs_load(config_path, name):
    cfg = load_config(config_path(name))
    for key, value in NAMED_CONFIGS[name].items():
        assert getattr(cfg, key) == value, key


def test_load_config_overrides(fixture_path):
    cfg = load_config(fixture_path("tiny.conf"), {"seed": "9", "steps": None})
    assert cfg.seed == 9
    assert cfg.steps == 2


@pytest.mark.parametrize(
    "overrides",
    [
        {"views": "zero"},
        {"unknown_key": "1"},
        {"dim": "18"},
        {"width": "20"},
        {"rho_e": "1.0"},
    ],
)
def test_load_config_rejects(fixture_path, overrides):
    with pytest.raises(ConfigError):
        load_config(fixture_path("tiny.conf"), overrides)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.conf")


def test_config_text_reloads(tmp_path, micro_cfg):
    path = tmp_path / "run.conf"
    path.write_text(config_text(micro_cfg), encoding="utf-8")
    assert load_config(path) == micro_cfg


def test_atomic_write_replaces_and_creates_dirs(tmp_path):
    path = tmp_path / "a" / "b.txt"
    atomic_write(path, "one")
    atomic_write(path, "two")
    assert path.read_text() == "two"
    assert [p.name for p in path.parent.iterdir()] == ["b.txt"]


def test_scene_text_reparses(tmp_path, fixture_path):
    scene = read_scene(fixture_path("two_cams.scene"))
    path = tmp_path / "scene.txt"
    path.write_text(scene_text(scene), encoding="utf-8")
    again = read_scene(path)
    assert again.primitives == scene.primitives
    assert np.array_equal(again.images, scene.images)


def test_read_scene_bad_class(fixture_path):
    with pytest.raises(SceneError):
        read_scene(fixture_path("bad_class.scene"))


@pytest.mark.parametrize(
    "text",
    [
        "",
        "cam 1 0 0 0 0 0 3 16 16\n",
        "scene 16 16 2 2 0\n",
        "scene 16 16 2 2 0 3\ncam 1 0 0 0 0 0 3 16 16\n",
    ],
)
def test_read_scene_malformed(tmp_path, text):
    path = tmp_path / "bad.scene"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(SceneError):
        read_scene(path)


@pytest.mark.parametrize(
    "line",
    [
        "prim cone 0 0 0 1 1 1 1 0",
        "prim sphere 0 0 0 0.5 1 1 1",
        "prim box 0 0 0 1 1 1 1 1 x 0",
        "prim sphere 0 0 0 0.5 1 1 1 c",
    ],
)
def test_parse_primitive_line_errors(line):
    with pytest.raises(SceneError):
        parse_primitive_line(line)


def test_gaussian_lines():
    fld = field_from_arrays(
        [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]],
        np.full((2, 3), 0.5),
        [0.25, 0.75],
        [[1.0, 0.0, 0.0, 0.0]] * 2,
        np.full((2, 3), 0.1),
        level="semantic",
    )
    lines = gaussian_lines(fld).splitlines()
    assert len(lines) == 2
    level, values = parse_gaussian_line(lines[1])
    assert level == "semantic"
    assert values.size == 14 + 64
    assert values[:4].tolist() == [3.0, 4.0, 5.0, 0.75]
    with pytest.raises(SceneError):
        parse_gaussian_line("g appearance 1 2 3")


def test_ppm_quantizes(tmp_path):
    img = np.zeros((2, 3, 3))
    img[0, 0] = [1.0, 0.5, 2.0]
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6\n3 2\n255\n")
    back = read_ppm(path)
    assert back.shape == (2, 3, 3)
    assert back[0, 0].tolist() == pytest.approx([1.0, 128 / 255, 1.0])


def test_plane_header_and_values(tmp_path):
    plane = np.arange(6, dtype=np.float64).reshape(2, 3)
    path = tmp_path / "d.uspl"
    write_plane(path, plane)
    data = path.read_bytes()
    assert data[:4] == b"USPL"
    assert struct.unpack("<III", data[4:16]) == (2, 3, 1)
    assert np.array_equal(read_plane(path)[:, :, 0], plane)


def test_plane_truncated(tmp_path):
    path = tmp_path / "d.uspl"
    write_plane(path, np.ones((2, 2, 2)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(SceneError):
        read_plane(path)


def test_masks_text():
    masks = MaskSet(enc_mask=np.array([[True, False, False, False]]), dec_mask=[np.array([False, True, False])])
    assert masks_text(masks) == "v0: 1010\n"


def test_checkpoint_stores_float32(tmp_path, micro_cfg):
    params = init_params(micro_cfg)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.cfg == micro_cfg
    assert list(loaded.tensors) == list(params.tensors)
    for name, t in params.tensors.items():
        assert np.array_equal(loaded[name].data, t.data.astype(np.float32).astype(np.float64))
        assert loaded[name].requires_grad


def test_checkpoint_truncated(tmp_path, micro_cfg):
    path = tmp_path / "ck.bin"
    path.write_bytes(checkpoint_bytes(init_params(micro_cfg))[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path, micro_cfg):
    data = checkpoint_bytes(init_params(micro_cfg))
    tampered = data.replace(b"n_gauss = 2\n", b"n_gauss = 3\n")
    assert tampered != data
    path = tmp_path / "ck.bin"
    path.write_bytes(tampered)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_jsonl(tmp_path):
    path = tmp_path / "log.jsonl"
    write_jsonl(path, [{"step": 1}])
    append_jsonl(path, {"step": 2, "total": 0.5})
    assert read_jsonl(path) == [{"step": 1}, {"step": 2, "total": 0.5}]
