import json
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from unisplat.checks import micro_config
from unisplat.cli import _run_cli
from unisplat.scene import gen_scene, make_teachers

ROOT = Path(__file__).resolve().parent.parent
FIX = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def fixture_text():
    def _load(name: str) -> str:
        p = FIX / name
        return p.read_text(encoding="utf-8")

    return _load


@pytest.fixture
def fixture_path():
    def _path(name: str) -> Path:
        return FIX / name

    return _path


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def tiny_scene(micro_cfg):
    return gen_scene(micro_cfg)


@pytest.fixture
def tiny_teachers(tiny_scene):
    return make_teachers(tiny_scene)


@pytest.fixture
def run_cli(capsys):
    def _run(mode: str, *args: str):
        rc = _run_cli(["unisplat", mode, *args])
        out = capsys.readouterr().out

        json_lines: list[Any] = []
        for line in (_line for _line in out.splitlines() if _line.strip()):
            json_lines.append(json.loads(line))
        return rc, json_lines

    return _run


@pytest.fixture
def config_path():
    def _path(name: str) -> Path:
        return ROOT / "configs" / f"{name}.conf"

    return _path
