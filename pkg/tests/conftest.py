import hashlib
from pathlib import Path

import pytest

from analogic.fog_synth import DatasetConfig, build_dataset


def tree_hashes(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A few dozen 16x16 entries, enough to exercise training and evaluation plumbing."""
    out = tmp_path_factory.mktemp("small_ds")
    return build_dataset(DatasetConfig(out_dir=str(out), width=16, height=16, source_pairs=12,
                                       target_train=10, target_heldout=6, seed=11))


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """The 64x32 toy corpus: 256 source pairs, 256 target clear, 64 held-out, seed 0."""
    out = tmp_path_factory.mktemp("toy_ds")
    return build_dataset(DatasetConfig(out_dir=str(out), seed=0))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
