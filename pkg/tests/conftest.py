import numpy as np
import pytest

from pyramidsep import NetworkSpec, build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_spec(variant="pyramid-sep-drop", depth=8, alpha=5, p_last=0.5, classes=10, size=8):
    """Toy network on size x size inputs; keeps unit tests fast."""
    return NetworkSpec(variant, depth, alpha, p_last, classes, input_shape=(3, size, size))


def small_net(seed=0, **kw):
    return build(small_spec(**kw), seed)


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; a test that errors out is recorded as FAIL."""
    recorded = []

    def verdict(number, title, passed, detail=""):
        recorded.append(number)
        ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({detail})")
        assert passed, f"criterion {number} failed: {detail}"

    yield verdict
    if not recorded:
        ACCEPTANCE.append((request.node.name, request.node.name, False, "errored before reaching a verdict"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{number}] {title}: {detail}")
