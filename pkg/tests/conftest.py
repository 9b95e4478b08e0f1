from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from robocore import geom, workloads

FIXTURES = Path(__file__).parent / "fixtures"


def _rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


coords = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
extents = st.floats(0.01, 1.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(coords, coords, coords)
half3 = st.tuples(extents, extents, extents)

obbs = st.builds(lambda c, h, s: geom.Obb(c, h, _rotation(s)), vec3, half3, st.integers(0, 2**32 - 1))
aabbs = st.builds(geom.Aabb, vec3, half3)


@pytest.fixture(scope="session")
def small_env():
    """Cluttered shelf scene small enough for per-test oracle walks."""
    return workloads.gen_env("cubby", 5, n_points=8192, n_obbs=256, max_depth=6)


@pytest.fixture(scope="session")
def small_ball():
    return workloads.gen_ball_query(3, n=4096, k=64, r=0.08, K=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
