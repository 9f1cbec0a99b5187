import numpy as np
import pytest

from dmcmtl.data import generate_synthetic, generate_weather


@pytest.fixture(scope="session")
def weather():
    return {"WA": generate_weather("WA", 1995, 2012, seed=11),
            "CA": generate_weather("CA", 1995, 2012, seed=12)}


@pytest.fixture(scope="session")
def gdd_synthetic(weather):
    return generate_synthetic("gdd", weather, 2, seasons_per_cultivar=5, seed=4, train_region="WA")


@pytest.fixture(scope="session")
def gdd_dataset(gdd_synthetic, weather):
    return gdd_synthetic.to_dataset(weather)


@pytest.fixture(scope="session")
def ferguson_synthetic(weather):
    return generate_synthetic("ferguson", weather, 2, seasons_per_cultivar=4, mask_rate=0.5,
                              seed=5, train_region="WA")


@pytest.fixture(scope="session")
def ferguson_dataset(ferguson_synthetic, weather):
    return ferguson_synthetic.to_dataset(weather)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
