import numpy as np
import pytest

from lffactor import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_diff(tensors, forward, step=1e-5):
    """Central finite differences of a scalar function of several Tensors.

    Returns one gradient array per tensor. `forward` must recompute the
    scalar from the tensors' current .data (double precision).
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = forward()
            flat[i] = old - step
            fm = forward()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def check_gradients(tensors, build_loss, rtol=1e-4, step=1e-5, mask=None):
    """Compare autodiff gradients of build_loss() against central differences.

    `build_loss` constructs a fresh graph from the tensors and returns the
    scalar loss node. `mask`, if given per tensor, selects points to check
    (used to skip non-smooth loci).
    """
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    ad.backward(loss)
    numeric = finite_diff(tensors, lambda: float(build_loss().data), step=step)
    for k, (t, num) in enumerate(zip(tensors, numeric)):
        ana = t.grad
        m = np.ones_like(num, dtype=bool) if mask is None else mask[k]
        denom = np.maximum(np.abs(num), 1.0)
        rel = np.abs(ana - num) / denom
        worst = float(rel[m].max()) if m.any() else 0.0
        assert worst <= rtol, f"gradient mismatch (tensor {k}): rel err {worst:.3e}"


# ---------------------------------------------------------------------------
# acceptance criteria reporting

_criterion_results = []


def check_criterion(number, description, passed):
    """Record an acceptance criterion verdict, then enforce it."""
    _criterion_results.append((number, description, bool(passed)))
    assert passed, f"CRITERION {number} FAILED - {description}"


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, description, ok in sorted(_criterion_results):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"CRITERION {number}: {verdict} - {description}")
