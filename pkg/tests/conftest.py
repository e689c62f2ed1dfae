import numpy as np
import pytest
import torch

from motionslots.datagen import GenConfig, ObjectSpec, render_clip


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def small_gen():
    return GenConfig(frame_shape=(32, 32), clip_length=5, object_size=(8.0, 12.0))


def straight_object(start, velocity, length, size=10.0, kind="square", color=(0.9, 0.1, 0.1)):
    start = np.asarray(start, dtype=float)
    traj = start + np.arange(length)[:, None] * np.asarray(velocity, dtype=float)
    return ObjectSpec(kind, color, size, traj, bool(np.any(velocity)))


def make_clip(objects, camera=None, length=5, shape=(32, 32), threshold=0.01):
    cfg = GenConfig(frame_shape=shape, clip_length=length, moving_threshold=threshold)
    cam = np.zeros((length, 2)) if camera is None else np.asarray(camera, dtype=float)
    return render_clip(objects, cam, cfg)


CRITERIA: list[str] = []


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
    line = f"criterion {number}: {status}  {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
