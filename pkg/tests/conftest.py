import numpy as np
import pytest

from pepinet import engine
from pepinet.pepi import ScaledModel


def conv_pool_margin(x, kernels, bias):
    """Smallest distance of the conv block from a non-differentiable point:
    |pooled| for the ReLU and (max - runner-up) inside each pool window."""
    z, _ = engine.conv2d(x, kernels, bias)
    n, c, h, w = z.shape
    hp, wp = h // 2, w // 2
    r = z[:, :, : hp * 2, : wp * 2].reshape(n, c, hp, 2, wp, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp, 4)
    top = np.sort(r, axis=-1)
    gap = (top[..., -1] - top[..., -2]).min()
    return min(gap, np.abs(top[..., -1]).min())


def model_margin(model: ScaledModel, views) -> float:
    margins = []
    b, k = views.shape[:2]
    x = views.reshape(b * k, 1, *views.shape[2:])
    for layer in model.encoder:
        margins.append(conv_pool_margin(x, layer.kernels, layer.bias))
        x, _ = engine.conv_block_apply(layer.kernels, layer.bias, x)
    _, (_, _, caches) = model.forward_blocks(views)
    for (h, total, z, act) in caches:
        if act == "relu":
            margins.append(np.abs(z).min())
    return float(min(margins))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
