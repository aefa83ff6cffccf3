import numpy as np
import pytest

from implicit_meta import model as M


def random_instance(rng, d_in=4, hidden=5, n_out=3, n=6, mode=M.HyperMode.PER_PARAMETER, lam_scale=1.0):
    params = M.MlpParams.init(rng, d_in, hidden, n_out)
    # push biases away from zero so ReLU kinks are not hit by finite differences
    params = params.like(params.flat() + 0.1 * rng.standard_normal(params.size))
    hypers = M.HyperSet.random(mode, params, rng, 0.0, lam_scale)
    batch = M.Batch(rng.standard_normal((n, d_in)), rng.integers(0, n_out, n))
    return params, hypers, batch


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 15):
        ok, detail = ACCEPTANCE.get(n, (False, "not run"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
