"""Shared fixtures."""

import json
from pathlib import Path

import numpy as np
import pytest

from mwcc_tools.model import Problem

from .factories import chain_v1, chain_v1_data, two_state_data


@pytest.fixture
def chain() -> Problem:
    return chain_v1()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def chain_file(tmp_path: Path) -> Path:
    path = tmp_path / "chain-v1.json"
    path.write_text(json.dumps(chain_v1_data()), encoding="utf-8")
    return path


@pytest.fixture
def two_state_file(tmp_path: Path) -> Path:
    path = tmp_path / "two-state.json"
    path.write_text(json.dumps(two_state_data()), encoding="utf-8")
    return path
