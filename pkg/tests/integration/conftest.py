"""Shared fixtures for CLI integration tests.

The session workspace holds one generated dataset and one trained checkpoint that
the detect, evaluate and ablate tests reuse.
"""

import shutil
import sys
import tempfile
from pathlib import Path

import pytest

# Add integration tests directory to path for test_helpers
sys.path.insert(0, str(Path(__file__).parent))
import main  # noqa: E402
from test_helpers import write_config  # noqa: E402


@pytest.fixture(scope="session")
def session_temp_dir():
    """Provide a session-scoped temporary directory."""
    tmpdir = tempfile.mkdtemp()
    yield Path(tmpdir)
    shutil.rmtree(tmpdir, ignore_errors=True)


@pytest.fixture(scope="session")
def workspace(session_temp_dir):
    """Generated dataset plus one trained checkpoint, shared by the session."""
    config_path = write_config(session_temp_dir)
    assert main.main(["generate-synthetic", "--config", str(config_path)]) == 0
    assert main.main(["train", "--config", str(config_path)]) == 0
    (checkpoint,) = sorted((session_temp_dir / "runs").glob("train-*/checkpoint.pt"))
    return {"dir": session_temp_dir, "config": config_path, "checkpoint": checkpoint}
