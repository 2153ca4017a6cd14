import pytest

from gtg.config import from_mapping

SMOKE = dict(
    n_samples=300, horizon=8, n_traj=20, k=5, T=20, hidden=32, n_blocks=1, time_dim=16,
    batch_size=16, train_steps=20, proxy_hidden=[16], proxy_train_steps=20,
    n_sample_trajs=2, context=4, q=4, seeds=[0],
)


@pytest.fixture
def smoke_cfg():
    return from_mapping(dict(SMOKE))


@pytest.fixture
def smoke_toml(tmp_path):
    path = tmp_path / "smoke.toml"
    lines = []
    for key, value in SMOKE.items():
        lines.append(f"{key} = {value!r}".replace("'", '"'))
    path.write_text("\n".join(lines) + "\n")
    return path


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record a pass/fail line for the test's acceptance criterion.

    The line starts as FAIL so a test that errors before recording still
    reports a failure.
    """
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    lines = request.config.stash[ACCEPTANCE_KEY]
    lines[number] = (False, f"{request.node.name} did not complete")

    def record(passed: bool, detail: str) -> bool:
        lines[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(lines):
        passed, detail = lines[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
