import numpy as np
import pytest

from riemannian_ambientflow import autodiff as ad

ACCEPTANCE_RESULTS: dict = {}


def pytest_addoption(parser):
    parser.addoption("--tier", choices=("default", "full"), default="default",
                     help="'full' also runs the long MNIST reproduction")
    parser.addoption("--preset", default=None, help="restrict the long tier to one preset (e.g. mnist14)")


@pytest.fixture
def tier(request):
    return request.config.getoption("--tier")


@pytest.fixture
def record_criterion():
    def _record(number: int, passed: bool | None, detail: str):
        """``passed=None`` marks a criterion that was not run."""
        ACCEPTANCE_RESULTS[number] = (passed, detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


def central_difference(fn, arrays, index, direction, h=1e-6):
    """Directional derivative of ``fn(*arrays)`` along ``direction`` in ``arrays[index]``."""
    plus = list(arrays)
    minus = list(arrays)
    plus[index] = arrays[index] + h * direction
    minus[index] = arrays[index] - h * direction
    return (float(ad.value(fn(*plus))) - float(ad.value(fn(*minus)))) / (2 * h)


def gradient_check(fn, arrays, rng, h=1e-6):
    """Worst relative error between the tape gradient and central differences,
    probing one random direction per argument."""
    leaves = [ad.Tensor(a) for a in arrays]
    grads = ad.gradient(lambda *xs: fn(*xs), *leaves)
    worst = 0.0
    for i, a in enumerate(arrays):
        if a.size == 0:
            continue
        v = rng.standard_normal(a.shape)
        num = central_difference(fn, [np.asarray(x) for x in arrays], i, v, h)
        ana = float(np.sum(grads[i] * v))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst
