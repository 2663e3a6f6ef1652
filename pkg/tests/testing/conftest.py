"""
Global pytest configuration and fixtures for the compiler and runtime test suites.
"""
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Generator

import pytest
from hypothesis import HealthCheck, settings as hypothesis_settings

# Make the package under src/ importable without installation
REPO_ROOT = Path(__file__).resolve().parents[2]
sys.path.insert(0, str(REPO_ROOT / "src"))

from cpc.config import DEFAULT_CONFIG_PATH, load_settings  # noqa: E402
from cpc.pipeline import Stage, compile_program  # noqa: E402

CORPUS_DIR = REPO_ROOT / "corpus"

# The autouse environment fixture is function scoped and does not change
# between generated examples.
hypothesis_settings.register_profile(
    "cpc",
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
hypothesis_settings.load_profile("cpc")


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    """Directory of bundled surface programs, scripts and golden outputs."""
    return CORPUS_DIR


@pytest.fixture
def temp_workspace() -> Generator[Path, None, None]:
    """Create a temporary workspace for testing."""
    temp_dir = tempfile.mkdtemp(prefix="cpc_test_")
    workspace = Path(temp_dir)
    yield workspace
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def memory_monitor():
    """Memory monitoring fixture (RSS delta since the fixture was created)."""
    import psutil
    process = psutil.Process()
    initial_memory = process.memory_info().rss

    def get_memory_usage():
        current_memory = process.memory_info().rss
        return current_memory - initial_memory

    return get_memory_usage


@pytest.fixture
def settings():
    """Settings from the bundled defaults only, isolated from the environment."""
    return load_settings(DEFAULT_CONFIG_PATH, environ={}, dotenv=False)


@pytest.fixture
def compile_source():
    """Compile surface text up to a stage; returns the ``Compilation``."""

    def compile_(text: str, until: Stage = Stage.CPS, filename: str = "<test>", **options):
        return compile_program(text, filename, until=until, **options)

    return compile_


@pytest.fixture(autouse=True)
def setup_test_environment(monkeypatch):
    """Keep CPC_* variables of the developer's shell out of the tests."""
    import os
    for key in list(os.environ):
        if key.startswith("CPC_"):
            monkeypatch.delenv(key, raising=False)
    monkeypatch.setenv("TESTING", "true")
