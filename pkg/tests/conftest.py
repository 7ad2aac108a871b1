import pytest

from rollbacksim.config import SimConfig


def small_config(**kw):
    base = dict(worker_count=4, checkpoint_level=2, checkpoint=True,
                recovery="Default", fail=False, mtbf=40.0, seed=1,
                backup_cost=0.01, process_cost=1.0, stencil_size=8,
                timesteps=8)
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture
def cfg():
    return small_config


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or \
        sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
