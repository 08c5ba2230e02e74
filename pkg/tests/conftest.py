import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sfpn.autograd import Tensor, backward  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build_loss, arrays, h=1e-4):
    """Max scale-relative error between autodiff and central differences.

    ``build_loss(*tensors)`` returns a 1x1x1x1 Tensor; ``arrays`` are float64
    arrays, one per differentiable input.
    """
    from oracles import central_difference

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build_loss(*tensors))
    worst = 0.0
    for k, a in enumerate(arrays):
        def f():
            return build_loss(*[Tensor(x) for x in arrays]).item()

        num = central_difference(f, a, h)
        ana = tensors[k].grad
        scale = max(np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


# ------------------------------------------------------------ toy training

@pytest.fixture(scope="session")
def toy3():
    from toy import trained

    return trained("SFPN-3")


@pytest.fixture(scope="session")
def toy5():
    from toy import trained

    return trained("SFPN-5")


@pytest.fixture(scope="session")
def toy_val():
    from toy import split

    return split()[1]


# --------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
