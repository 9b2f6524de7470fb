"""Latent interpolation and per-step perturbation on :class:`LatentRecord` objects.

Mixed noise maps are not renormalized, so an even blend of two independent
draws has variance 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generation import LatentRecord
from .tensor import RngStream


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    ua, ub = a.ravel(), b.ravel()
    cos = np.dot(ua, ub) / (np.linalg.norm(ua) * np.linalg.norm(ub))
    omega = np.arccos(np.clip(cos, -1.0, 1.0))
    if omega < 1e-12:
        return (1.0 - t) * a + t * b
    return (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)


def interpolate(records, weights, slerp: bool = False) -> LatentRecord:
    """Mix 2 or 4 records map by map with ``weights`` (summing to 1).

    A weight vector with a single 1 returns that record exactly.
    ``slerp=True`` (two records only) uses spherical interpolation instead.
    """
    records = list(records)
    weights = np.asarray(weights, dtype=np.float64)
    if len(records) not in (2, 4):
        raise ValueError(f"interpolate takes 2 or 4 records, got {len(records)}")
    if weights.shape != (len(records),):
        raise ValueError(f"need one weight per record, got {weights.shape}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {weights.sum()}")
    base = records[0]
    for r in records[1:]:
        if not base.compatible_with(r):
            raise ValueError("records differ in schedule or noise-map shapes")

    hot = np.flatnonzero(weights == 1.0)
    if len(hot) == 1:
        out = records[hot[0]].copy()
        out.meta = {"weights": weights.tolist()}
        return out

    if slerp:
        if len(records) != 2:
            raise ValueError("slerp mixing needs exactly two records")
        mixed = {l: _slerp(records[0].noises[l], records[1].noises[l], weights[1]) for l in base.noises}
    else:
        mixed = {}
        for l in base.noises:
            acc = weights[0] * records[0].noises[l]
            for w, r in zip(weights[1:], records[1:]):
                acc = acc + w * r.noises[l]
            mixed[l] = acc
    return LatentRecord(mixed, dict(base.schedule), None, {"weights": weights.tolist()})


@dataclass(frozen=True)
class InterpolationGrid:
    """Bilinear weights over four corners ordered top-left, top-right, bottom-left, bottom-right."""

    corners: tuple
    rows: int
    cols: int

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError("an interpolation grid needs four corner records")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid must be at least 2x2")

    def weights(self, i: int, j: int) -> np.ndarray:
        t = i / (self.rows - 1)
        u = j / (self.cols - 1)
        return np.array([(1 - t) * (1 - u), (1 - t) * u, t * (1 - u), t * u])

    def cells(self):
        """Mixed records in row-major order."""
        for i in range(self.rows):
            for j in range(self.cols):
                yield (i, j), interpolate(self.corners, self.weights(i, j))


def perturb(record: LatentRecord, step: int, epsilon: float, rng: RngStream) -> LatentRecord:
    """Copy of ``record`` with ``noises[step] += epsilon * delta``, ``delta ~ N(0, I)``."""
    L = record.steps
    if not 1 <= step <= L:
        raise ValueError(f"step {step} outside 1..{L}")
    out = record.copy()
    e = out.noises[step]
    delta = rng.normal(e.shape, dtype=e.dtype)
    out.noises[step] = e + epsilon * delta
    out.meta = dict(record.meta, perturbed_step=step, epsilon=epsilon)
    return out
