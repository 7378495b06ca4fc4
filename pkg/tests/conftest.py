import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from ipercept.geometry import BinaryMask

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "ipercept" / "fixtures"


def rect_mask(x0=80, x1=120, y0=40, y1=60, w=320, h=240):
    m = np.zeros((h, w), dtype=bool)
    m[y0 : y1 + 1, x0 : x1 + 1] = True
    return BinaryMask(m)


def random_blob(rng, w=96, h=72, parts=None):
    """Union of a few random rotated ellipses; never empty, possibly touching the border."""
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    k = parts or int(rng.integers(1, 4))
    for _ in range(k):
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        a, b = rng.uniform(2.0, w / 3), rng.uniform(2.0, h / 3)
        th = rng.uniform(0, math.pi)
        c, s = math.cos(th), math.sin(th)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        m |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if not m.any():
        m[int(h / 2), int(w / 2)] = True
    return BinaryMask(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES
