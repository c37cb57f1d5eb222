import math

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# Two-bus line (g, b) = (1, 4) serving a unit load; roots of the balance
# equation computed by bracketed bisection outside the package.
TWOBUS_THETA_STAR = 0.26146598028663626
TWOBUS_THETA_BAR = 2.3901693470494285
TWOBUS_MU_STAR = 1.1433883276354018
TWOBUS_MU_BAR = 0.6213175547175392
TWOBUS_COST_STAR = 1.0679758703698872
TWOBUS_COST_BAR = 4.461435894335995
TWOBUS_RIDGE = math.atan(4.0)


def central_gradient(f, x, h=1e-6):
    import numpy as np

    x = np.asarray(x, dtype=float)
    out = []
    for k in range(x.size):
        step = h * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = step
        out.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
    return np.stack(out, axis=-1)


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """``report(criterion, passed, text)``; ``passed=None`` marks a skipped part."""
    def record(criterion, passed, text):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status}  criterion {criterion}: {text}"
        ACCEPTANCE_LINES.append((criterion, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
