import sys
from pathlib import Path

import pytest

# Make the sibling oracles module importable from every test file.
sys.path.insert(0, str(Path(__file__).parent))

from crowdflow.model import ModelConfig


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every stage."""
    return ModelConfig(
        backbone_channels=(4, 6, 8, 8),
        n_refine_blocks=1,
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion that ran."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        ok, detail = RESULTS[num]
        terminalreporter.write_line(f"[{num}] {'PASS' if ok else 'FAIL'} - {detail}")
