from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from gazepref.cascade import load_cascade
from gazepref.imaging import load_pnm, to_grayscale

DATA = Path(__file__).parent / "data"

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def face_model():
    return load_cascade(DATA / "lbpcascade_frontalface_opencv.xml")


@pytest.fixture(scope="session")
def eye_model():
    return load_cascade(DATA / "haarcascade_eye.xml")


@pytest.fixture(scope="session")
def face_frame():
    """150x150 RGB crop with one frontal face and two open eyes."""
    return load_pnm(DATA / "astronaut_face.ppm")


@pytest.fixture(scope="session")
def face_gray(face_frame):
    return to_grayscale(face_frame)


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or rep.when != "call" and outcome == "passed":
                continue
            n = props["criterion"]
            mark = "PASS" if outcome == "passed" else "FAIL"
            lines.setdefault(n, []).append(f"{mark}  {props.get('detail', '')}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            for text in lines[n]:
                terminalreporter.write_line(f"criterion {n:2d}: {text}")
