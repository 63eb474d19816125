import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dopplerio.manifold import NavState, so3_exp

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by the acceptance tests, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def random_state(rng, scale=1.0) -> NavState:
    return NavState(
        rot=so3_exp(rng.uniform(-2, 2, 3)), pos=rng.normal(size=3) * 5 * scale,
        ext_rot=so3_exp(rng.normal(size=3) * 0.3), ext_pos=rng.normal(size=3) * 0.5,
        vel=rng.normal(size=3) * 3 * scale, bias_gyro=rng.normal(size=3) * 0.01,
        bias_acc=rng.normal(size=3) * 0.1, gravity=np.array([0.0, 0.0, -9.81]) + rng.normal(size=3) * 0.05,
    )


def numeric_jacobian(f, dim, eps=1e-6):
    """Central differences of f: R^dim -> R^m at 0."""
    cols = []
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = eps
        cols.append((np.atleast_1d(f(d)) - np.atleast_1d(f(-d))) / (2 * eps))
    return np.stack(cols, axis=-1)


def rel_err(A, B) -> float:
    return float(np.abs(A - B).max() / max(np.abs(B).max(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
