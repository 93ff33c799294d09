import numpy as np
import pytest
import torch

from motionlm.kinematics import FRAME_DIM, MotionSequence, default_skeleton
from motionlm.synth import generate_split

torch.set_num_threads(1)


def random_motion(rng, T=60, vel_scale=0.02):
    """Frames with arbitrary (unnormalised) 6D blocks and random root steps."""
    f = rng.normal(size=(T, FRAME_DIM))
    f[:, 0:3] *= vel_scale
    p0 = rng.normal(size=3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return MotionSequence(f, skeleton=default_skeleton(), initial_root_position=p0, initial_root_rotation=q)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def clips():
    return generate_split("train", 24, seed=3)


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n)`` feed one summary line per criterion.

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def _entry(n):
    return CRITERIA.setdefault(n, {"ok": True, "tests": 0, "notes": []})


@pytest.fixture
def note(request):
    """``note("key=value")`` attaches a measured value to the criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _entry(marker.args[0])["notes"].append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    e = _entry(marker.args[0])
    if rep.when == "call":
        e["tests"] += 1
    if rep.failed or (rep.when == "setup" and rep.skipped):
        e["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  " + "  ".join(e["notes"]))
