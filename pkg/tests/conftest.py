import numpy as np
import pytest

from mvp3d import autodiff as ad

FD_STEP = 1e-5
FD_FLOOR = 1e-6


def fd_check(build, *arrays, tol=1e-5, h=FD_STEP, floor=FD_FLOOR):
    """Compare backprop of scalar ``build(*nodes)`` with central differences.

    Returns the max relative error over every input entry.
    """
    nodes = [ad.parameter(a) for a in arrays]
    loss = build(*nodes)
    ad.backward(loss)
    worst = 0.0
    for n in nodes:
        def f(n=n):
            with ad.no_grad():
                return float(build(*nodes).value)
        num = ad.numerical_grad(f, n.value, h=h)
        worst = max(worst, float(ad.relative_error(n.grad, num, floor).max()))
    assert worst < tol, f"max relative error {worst:.3e} >= {tol}"
    return worst


def weighted_sum(node, seed=0):
    """Scalar read-out with random weights so every output entry matters."""
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=node.shape)
    return ad.sum_(ad.mul(node, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scenes():
    from mvp3d.scenegen import SceneConfig, generate_scenes
    return generate_scenes(4, 5, SceneConfig(V=3, N_max=2, J=5, H=32, W=32, heatmap_sigma_px=1.5))


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def emit(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
