import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vecsim.oracle import Constant, OracleDirectory, OracleEndpoint, SeededStream  # noqa: E402
from vecsim.verifiable_call import NonceStream  # noqa: E402

SCENARIOS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scenarios")


@pytest.fixture
def directory():
    return OracleDirectory(
        [
            OracleEndpoint.create("oracle://rng", SeededStream(42)),
            OracleEndpoint.create("oracle://feed/ETHUSD", Constant(bytes.fromhex("00000096"))),
        ]
    )


@pytest.fixture
def stream():
    return NonceStream(1)


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        ok, detail = acceptance.RESULTS[number]
        terminalreporter.write_line(acceptance.format_line(number, ok, detail))
