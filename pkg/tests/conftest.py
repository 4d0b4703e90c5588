import numpy as np
import pytest

from lipmargin.nn import DenseLayer, Model

ACCEPTANCE_RESULTS = []


def random_model(rng, dims=None, output_rectified=False, output_bias=0.0):
    if dims is None:
        depth = rng.integers(1, 4)
        dims = [int(rng.integers(2, 6)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    layers = []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = k == len(dims) - 2
        bias = rng.normal(size=b) + (output_bias if last else 0.0)
        layers.append(DenseLayer(rng.normal(size=(b, a)), bias, "identity" if last else "relu"))
    return Model(layers, output_rectified=output_rectified)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, text in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {text}")
