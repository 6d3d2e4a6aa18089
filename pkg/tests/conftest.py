import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dicsopt import engines

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

# mean dynamics and tracking identity must hold on every optimizing run
TRACKING_TOL = 1e-10
OPTIMIZER_RUNS = []
ACCEPTANCE = {}


@pytest.fixture(autouse=True, scope="session")
def _audit_optimizer_runs():
    original = engines._optimize

    def wrapped(*args, **kwargs):
        trace = original(*args, **kwargs)
        OPTIMIZER_RUNS.append({
            "kind": trace.kind,
            "mean_dynamics_err": trace.diagnostics["mean_dynamics_err"],
            "tracking_identity_err": trace.diagnostics["tracking_identity_err"],
        })
        return trace

    engines._optimize = wrapped
    yield
    engines._optimize = original


@pytest.fixture(autouse=True)
def _tracking_invariants_hold():
    start = len(OPTIMIZER_RUNS)
    yield
    for run in OPTIMIZER_RUNS[start:]:
        assert run["mean_dynamics_err"] <= TRACKING_TOL, run
        assert run["tracking_identity_err"] <= TRACKING_TOL, run


@pytest.fixture
def acceptance():
    """Record one criterion's verdict for the end-of-run summary."""

    def record(number, ok, detail=""):
        ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    if 7 in ACCEPTANCE:
        worst = max((max(r["mean_dynamics_err"], r["tracking_identity_err"]) for r in OPTIMIZER_RUNS),
                    default=0.0)
        ACCEPTANCE[7].append((worst <= TRACKING_TOL,
                              f"session audit of {len(OPTIMIZER_RUNS)} runs, worst {worst:.1e}"))
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p[0] for p in parts)
        detail = "; ".join(p[1] for p in parts if p[1])
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
