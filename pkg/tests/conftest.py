import numpy as np
import pytest

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def central_difference(f, x, h=1e-6):
    """Element-wise central differences of a scalar function."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


@pytest.fixture
def record():
    """Log one acceptance criterion outcome for the end-of-run summary."""

    def _record(criterion: str, status: str, detail: str):
        _ACCEPTANCE[criterion] = (status, detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status:4s}  {name}: {detail}")
