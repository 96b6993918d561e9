import importlib

import numpy as np
import pytest

from savedrl import kernels
from savedrl.kernels import _pykernels

try:
    from savedrl.kernels import _ckernels
except ImportError:  # extension not built in this environment
    _ckernels = None

needs_compiled = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def _brute_radius(points, queries, alpha):
    out = []
    for q in queries:
        out.append(any(np.sqrt(((q - p) ** 2).sum()) <= alpha for p in points))
    return np.array(out, dtype=bool)


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")


def test_pure_python_switch(monkeypatch):
    monkeypatch.setenv("SAVEDRL_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.radius_any is _pykernels.radius_any
    finally:
        monkeypatch.delenv("SAVEDRL_PURE_PYTHON")
        importlib.reload(kernels)


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_compiled)], ids=["python", "compiled"])
def test_radius_any_matches_scan(impl):
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.uniform(-5, 5, (rng.integers(1, 40), 4))
        qs = rng.uniform(-6, 6, (50, 4))
        alpha = rng.uniform(0.5, 4)
        assert np.array_equal(impl.radius_any(pts, qs, alpha), _brute_radius(pts, qs, alpha))


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_compiled)], ids=["python", "compiled"])
def test_radius_boundary_inclusive(impl):
    pts = np.zeros((1, 4))
    assert impl.radius_any(pts, np.array([[3.0, 0, 0, 0], [3.0001, 0, 0, 0]]), 3.0).tolist() == [True, False]
    assert impl.radius_any(np.zeros((0, 4)), np.zeros((2, 4)), 1.0).tolist() == [False, False]


@pytest.mark.parametrize("impl", [_pykernels, pytest.param(_ckernels, marks=needs_compiled)], ids=["python", "compiled"])
def test_count_violations_matches_loop(impl):
    rng = np.random.default_rng(1)
    rects = np.array([[-2.0, 0.0, -1.0, 1.0], [1.0, 3.0, 1.0, 2.0]])
    paths = rng.uniform(-4, 4, (30, 6, 5, 4))
    expected = np.zeros(30, dtype=np.int64)
    for p in range(30):
        for n in range(6):
            hit = False
            for x, y in paths[p, n, :, :2]:
                for x0, x1, y0, y1 in rects:
                    hit |= x0 <= x <= x1 and y0 <= y <= y1
            expected[p] += hit
    assert np.array_equal(impl.count_violations(paths, rects), expected)
    assert np.array_equal(impl.count_violations(paths, np.zeros((0, 4))), np.zeros(30, dtype=np.int64))


@needs_compiled
def test_backends_agree_on_large_inputs():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(500, 4)) * 3
    qs = rng.normal(size=(2000, 4)) * 3
    assert np.array_equal(_ckernels.radius_any(pts, qs, 1.0), _pykernels.radius_any(pts, qs, 1.0))
    paths = rng.normal(size=(64, 10, 16, 4)) * 5
    rects = np.array([[-3.0, 3.0, -1.0, 1.0]])
    assert np.array_equal(_ckernels.count_violations(paths, rects), _pykernels.count_violations(paths, rects))
