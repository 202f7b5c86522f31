from __future__ import annotations

import numpy as np
import pytest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(20240601))


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("HOPF_HEAT_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("HOPF_HEAT_LOG_DIR", str(tmp_path / "logs"))
    return tmp_path
