"""conftest.py :: Setup fixtures for pytest."""

from __future__ import annotations

import pathlib
import typing as t

import numpy as np
import pytest

from lipfast import tensor as T
from lipfast.audio import save_wav
from lipfast.model import ModelConfig

config_path = pathlib.Path(__file__).parent / "test_config.json"


@pytest.fixture(scope="function")
def tiny_config() -> ModelConfig:
    """Provide the desk-scale two-class model configuration."""
    return ModelConfig.tiny(2)


@pytest.fixture(scope="function")
def float64() -> t.Iterator[None]:
    """Run the test with float64 as the default dtype."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    """Provide a seeded numpy generator."""
    return np.random.default_rng(0)


@pytest.fixture(scope="function")
def write_wav(
    tmp_path: pathlib.Path,
) -> t.Callable[..., pathlib.Path]:
    """Provide a helper that writes samples to a WAV file in `tmp_path`."""

    def write(
        name: str,
        samples: np.ndarray,
        sample_rate: int = 16000,
        encoding: str = "pcm16",
    ) -> pathlib.Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        save_wav(path, samples, sample_rate, encoding=encoding)
        return path

    return write


@pytest.fixture(scope="function")
def config_file(tmp_path: pathlib.Path) -> pathlib.Path:
    """Copy the tiny JSON config into `tmp_path`."""
    path = tmp_path / "config.json"
    path.write_text(config_path.read_text())
    return path
