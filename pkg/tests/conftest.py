import numpy as np
import pytest

from donut import Dataset, DonutModel, ModelConfig, SimSpec, simulate

# criterion number -> (status, detail) with status PASS, FAIL or SKIP;
# filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, tuple[str, str]] = {}

TINY = ModelConfig(rep_width=8, rep_layers=2, head_width=6, head_layers=2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        status, detail = ACCEPTANCE_LINES[k]
        terminalreporter.write_line(f"criterion {k:>2}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    return DonutModel.init(4, seed=3, config=TINY)


def random_batch(rng, n=10, d=4):
    """Covariates in [-1, 1], both arms present, arbitrary outcomes."""
    X = rng.uniform(-1, 1, size=(n, d))
    T = np.r_[np.ones(n // 2), np.zeros(n - n // 2)]
    rng.shuffle(T)
    Y = rng.normal(size=n)
    return Dataset(X, T, Y)


@pytest.fixture
def batch(rng):
    return random_batch(rng)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(SimSpec(n_control=100, n_treated=200, seed=5))


def perturb_params(model, rng, scale=0.5):
    """Move every parameter (including epsilon and biases) off its init."""
    for v in model.params.values():
        v += rng.normal(scale=scale, size=v.shape)
    return model
