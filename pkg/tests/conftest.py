import pytest

from holdstab.system_model import builtin_nonholonomic


@pytest.fixture(scope="session")
def builtin():
    return builtin_nonholonomic()


@pytest.fixture(scope="session")
def builtin_noisy():
    return builtin_nonholonomic(noise_power=0.1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
