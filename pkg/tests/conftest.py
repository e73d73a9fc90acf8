import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mlcwmd.data import Dataset
from mlcwmd.dgp import builtin_table1, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_dataset(y, groups, U=None, V=None, D=None, X_fixed=None, levels=None, domain="01", **names):
    """Dataset from raw arrays with generic column names."""
    n = len(groups)
    U = np.zeros((n, 0)) if U is None else np.asarray(U, dtype=float).reshape(n, -1)
    V = np.zeros((n, 0), dtype=int) if V is None else np.asarray(V, dtype=int).reshape(n, -1)
    D = np.zeros((n, 0)) if D is None else np.asarray(D, dtype=float).reshape(n, -1)
    X_fixed = np.zeros((n, 0)) if X_fixed is None else np.asarray(X_fixed, dtype=float).reshape(n, -1)
    J = int(np.max(groups)) + 1
    if levels is None:
        levels = tuple(tuple(str(i + 1) for i in range(int(V[:, r].max()))) for r in range(V.shape[1]))
    return Dataset(
        y=None if y is None else np.asarray(y, dtype=float), groups=np.asarray(groups, dtype=int),
        group_labels=tuple(f"g{j + 1}" for j in range(J)), U=U, V=V, D=D, X_fixed=X_fixed,
        u_names=names.get("u_names", tuple(f"u{i + 1}" for i in range(U.shape[1]))),
        v_names=names.get("v_names", tuple(f"v{i + 1}" for i in range(V.shape[1]))),
        d_names=names.get("d_names", tuple(f"d{i + 1}" for i in range(D.shape[1]))),
        fixed_names=names.get("fixed_names", tuple(f"f{i + 1}" for i in range(X_fixed.shape[1]))),
        levels=levels, ising_domain=domain,
    )


@pytest.fixture(scope="session")
def table1():
    return builtin_table1()


@pytest.fixture(scope="session")
def table1_sample(table1):
    """One seed-pinned draw from the three-cluster benchmark generator."""
    return generate(table1, np.random.default_rng(11))
