import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from ctlio.geometry import RigidTransform, UnitQuaternion

settings.register_profile("ctlio", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctlio")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
seeds = st.integers(0, 2**32 - 1)


@st.composite
def rotations(draw):
    q = np.array(draw(st.tuples(*[st.floats(-1.0, 1.0, allow_nan=False)] * 4)))
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return UnitQuaternion.from_array(q)


@st.composite
def transforms(draw):
    return RigidTransform(draw(rotations()), draw(vec3))


def random_transform(rng, t_scale=1.0, r_scale=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform(UnitQuaternion.from_rotvec(axis * rng.uniform(0, r_scale)), rng.normal(size=3) * t_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting -------------------------------------------------------------

SESSION_START = [0.0]
ACCEPTANCE_LINES = []


def pytest_sessionstart(session):
    import time
    SESSION_START[0] = time.perf_counter()


def pytest_collection_modifyitems(config, items):
    # the acceptance suite runs last so its wall-clock check covers everything before it
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def report(criterion: str, ok: bool, detail: str, status: str = "") -> bool:
    line = f"{status or ('PASS' if ok else 'FAIL')} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
