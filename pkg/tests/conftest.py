import pytest

from mqttforensics.synth import build_dataset, default_scenario


@pytest.fixture(scope="session")
def small_scenario():
    return default_scenario(seed=5, target_flows=3000)


@pytest.fixture(scope="session")
def small_flows(small_scenario):
    return build_dataset(small_scenario)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
