"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from matscat.core import GridSpec, HermitianPotential, boundary_pair  # noqa: E402
from matscat.direct import scattering_dataset  # noqa: E402
from matscat.inverse import run_inverse  # noqa: E402
from matscat.validate import roundtrip_report  # noqa: E402

# Round-trip problem: a coupled 2x2 exponential well with mixed Robin/Dirichlet conditions.
H_COUPLED = np.array([[1.0, 0.5], [0.5, -1.0]])
U_MIXED = np.diag([np.exp(1j * np.pi / 2), -1.0])
GRID_ROUNDTRIP = GridSpec(K_max=40.0, n_k=1600, X_max=20.0, n_x=401)


class RoundTrip:
    """Direct map, inversion and error metrics of one problem, with timings."""

    def __init__(self, V, U, grid):
        self.V, self.U, self.grid = V, U, grid
        self.timings = {}
        t0 = time.perf_counter()
        self.data = scattering_dataset(V, boundary_pair(U), grid)
        t1 = time.perf_counter()
        self.model = run_inverse(self.data, grid)
        t2 = time.perf_counter()
        self.metrics = roundtrip_report((V, U), self.model, grid, data=self.data)
        t3 = time.perf_counter()
        self.timings = {"direct": t1 - t0, "inverse": t2 - t1, "rescatter": t3 - t2,
                        "total": t3 - t0}


@pytest.fixture(scope="session")
def roundtrip_problem():
    return RoundTrip(HermitianPotential.exp_decay(H_COUPLED), U_MIXED, GRID_ROUNDTRIP)


@pytest.fixture(scope="session")
def roundtrip_refined(roundtrip_problem):
    return RoundTrip(roundtrip_problem.V, roundtrip_problem.U, GRID_ROUNDTRIP.refined(2))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "acceptance" in props and rep.when == "call":
                lines.append((props["acceptance"], outcome, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, outcome, detail in sorted(lines):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
