"""Shared fixtures and the acceptance-criteria summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from maskboot.config import EncoderConfig, SceneGenConfig
from maskboot.scenegen import generate_scene

# tiny-but-real encoder for unit tests; the default config is exercised in
# the acceptance suite
TINY_ENCODER = dict(
    channels=(4, 4, 8, 8),
    blocks=(2, 1, 1),
    proj_hidden=16,
    embed_dim=8,
    fusion_hw=4,
    dtype="float64",
)


@pytest.fixture
def tiny_encoder_cfg() -> EncoderConfig:
    return EncoderConfig(**TINY_ENCODER)


@pytest.fixture
def small_scenes() -> list:
    cfg = SceneGenConfig(scene_count=8, image_size=64)
    return [generate_scene(seed, cfg) for seed in range(8)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE_RESULTS.append((name, "PASS" if passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    items = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid:
                items[nodeid] = status
    if not items:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid in sorted(items):
        status = items[nodeid]
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(
            f"{'PASS' if status == 'passed' else 'FAIL'}  {name}"
        )
