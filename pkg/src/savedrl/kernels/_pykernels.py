"""Numpy implementations of the inner-loop kernels (fallback path)."""
from __future__ import annotations

import numpy as np


def radius_any(points: np.ndarray, queries: np.ndarray, alpha: float, block: int = 512) -> np.ndarray:
    """For each query, whether any point lies within distance ``alpha`` (inclusive)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    out = np.zeros(len(queries), dtype=bool)
    if len(points) == 0:
        return out
    for s in range(0, len(queries), block):
        q = queries[s : s + block]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        out[s : s + block] = (np.sqrt(d2) <= alpha).any(axis=1)
    return out


def count_violations(paths: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Number of particles per candidate that touch any rectangle.

    ``paths`` is ``(P, N, S, d)`` with positions in the first two columns;
    ``rects`` is ``(R, 4)`` rows of ``(x_min, x_max, y_min, y_max)``.
    """
    paths = np.asarray(paths, dtype=np.float64)
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    P, N = paths.shape[:2]
    if len(rects) == 0:
        return np.zeros(P, dtype=np.int64)
    x = paths[..., 0, None]
    y = paths[..., 1, None]
    hit = (x >= rects[:, 0]) & (x <= rects[:, 1]) & (y >= rects[:, 2]) & (y <= rects[:, 3])
    return hit.any(axis=(-1, -2)).sum(axis=1).astype(np.int64)
