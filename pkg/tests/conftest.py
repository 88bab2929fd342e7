"""Shared fixtures: a generated toy workspace, preprocessed once per session.

Tests that mutate caches or outputs must copy the workspace first (see
``copy_workspace``); everything else can read the session copy directly.
"""

import shutil
from pathlib import Path

import pytest

from unicir.config import RunConfig, load_config
from unicir.pipeline import run_preprocess
from unicir.toydata import DEFAULT_CONFIG, generate


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_ws(tmp_path_factory) -> Path:
    """Toy dataset + config.yaml + completed preprocessing caches."""
    root = tmp_path_factory.mktemp("toyws")
    generate(root)
    (root / "config.yaml").write_text(DEFAULT_CONFIG, encoding="utf-8")
    run_preprocess(load_config(root / "config.yaml"))
    return root


@pytest.fixture()
def toy_config(toy_ws) -> RunConfig:
    return load_config(toy_ws / "config.yaml")


def copy_workspace(src: Path, dst: Path) -> Path:
    shutil.copytree(src, dst)
    return dst


@pytest.fixture()
def toy_ws_copy(toy_ws, tmp_path) -> Path:
    """Private mutable copy of the preprocessed workspace."""
    return copy_workspace(toy_ws, tmp_path / "ws")
