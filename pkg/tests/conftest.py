import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from failband.synth import FailureSpec, SynthConfig, generate_dataset  # noqa: E402

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and fail the test when the check does not hold."""

    def check(name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


@pytest.fixture(scope="session")
def small_world():
    """Train / calibration / test splits of one small synthetic world."""
    base = SynthConfig(n_rollouts=40, seed=3)
    header, train = generate_dataset(base)
    _, cal = generate_dataset(SynthConfig(n_rollouts=30, seed=3, start_index=1000))
    specs = (FailureSpec("SensorShift", 0.25), FailureSpec("Slip", 0.25))
    _, test = generate_dataset(SynthConfig(n_rollouts=40, seed=3, start_index=2000, failure_spec=specs))
    return header, train, cal, test
