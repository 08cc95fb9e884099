import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from xraft import engine as E  # noqa: E402
from xraft.imaging import ColorMatrix  # noqa: E402

E.configure_determinism(1)


@pytest.fixture
def f64():
    with E.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def q():
    return ColorMatrix.default()


def gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, floor=1e-2, sample=None, seed=0):
    """Central differences on a scalar function of float64 tensors.

    Compares every coordinate; relative error is scaled by
    max(|analytic|, |numeric|, floor) so vanishing gradients do not divide by zero.
    With ``sample`` set, only that many random coordinates per input are probed.
    """
    pick = np.random.default_rng(seed)
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = torch.zeros_like(t) if grads[i] is None else grads[i]
        flat = t.detach().reshape(-1)
        coords = range(flat.numel())
        if sample is not None and flat.numel() > sample:
            coords = pick.choice(flat.numel(), size=sample, replace=False)
        for j in coords:
            args_p = [x.detach().clone() for x in inputs]
            args_m = [x.detach().clone() for x in inputs]
            args_p[i].reshape(-1)[j] += eps
            args_m[i].reshape(-1)[j] -= eps
            with torch.no_grad():
                num = (fn(*args_p) - fn(*args_m)).item() / (2 * eps)
            a = analytic.reshape(-1)[j].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    assert worst <= rtol, f"relative gradient error {worst:.3e} > {rtol}"
    return worst


# -- acceptance verdicts ----------------------------------------------------------------

_VERDICTS: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _VERDICTS[criterion] = line
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[key])
