import numpy as np
import pytest

from fmformer import tensor as T
from fmformer.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def numeric_grad(fn, arrays, index, h=1e-3):
    """Central difference of scalar fn(*arrays) w.r.t. arrays[index], every coordinate."""
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        pos = it.multi_index
        orig = target[pos]
        target[pos] = orig + h
        up = fn(*arrays)
        target[pos] = orig - h
        down = fn(*arrays)
        target[pos] = orig
        grad[pos] = (up - down) / (2 * h)
    return grad


def gradcheck(op, *arrays, h=1e-6, rtol=1e-5, atol=1e-8, seed=0):
    """Compare analytic gradients of sum(op(...) * R) against central differences (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.default_dtype(np.float64):
        probe = op(*[Tensor(a) for a in arrays]).data
        weights = np.random.default_rng(seed).normal(size=probe.shape)

        def scalar(*arrs):
            return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        T.tsum(op(*leaves) * weights).backward()
        for i, leaf in enumerate(leaves):
            expected = numeric_grad(scalar, [a.copy() for a in arrays], i, h)
            np.testing.assert_allclose(leaf.grad, expected, rtol=rtol, atol=atol)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def report(request, capsys):
    """Record one acceptance line, print it live, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def _report(tag: str, ok: bool, detail: str) -> None:
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
