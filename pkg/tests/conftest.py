import numpy as np
import pytest

from pgnseg.toynet import ForwardTrace, softmax

TOY_DIMS = {"c_prev": 4, "c_feat": 6, "num_classes": 5, "height": 8, "width": 8}


def trace_from(logits, psi, pre_relu=None, psi_prev=None):
    """Trace built directly from logits and last-layer features (1 x 1 spatial allowed)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits.reshape(-1, 1, 1)
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1, 1)
    probs = softmax(logits)
    pre_relu = psi if pre_relu is None else pre_relu
    return ForwardTrace(psi_prev, pre_relu, pre_relu, psi, logits, probs, probs.argmax(axis=0))


def probs_trace(probs, psi):
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 1, 1)
    psi = np.asarray(psi, dtype=np.float64).reshape(-1, 1, 1)
    with np.errstate(divide="ignore"):
        logits = np.log(probs)
    return ForwardTrace(None, psi, psi, psi, logits, probs, probs.argmax(axis=0))


@pytest.fixture
def toy_dims():
    return dict(TOY_DIMS)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
