import numpy as np
import pytest
import torch

from rsrpdiff.geometry import Building, PolygonScene
from rsrpdiff.mapio import MultiAttributeMap


def pytest_configure(config):
    torch.set_num_threads(1)


def flat_ground(x, y):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def box(bid, x0, y0, x1, y1, roof, ground=0.0):
    fp = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    return Building(bid, fp, roof, ground)


def scene_of(*buildings):
    return PolygonScene(list(buildings), ground_altitude_fn=flat_ground)


@pytest.fixture
def flat_map():
    def make(h=32, w=32, cell=5.0, alt=0.0):
        return MultiAttributeMap(np.full((h, w), alt), np.zeros((h, w)), cell, (0.0, 0.0))
    return make


ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
