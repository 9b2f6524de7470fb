"""Continuous-time noise schedules and their L-step discretization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VARIANTS = ("udpm-sine", "cosine", "linear")
EXPONENTS = ("levels", "literal")


@dataclass(frozen=True)
class Schedule:
    """Signal retention ``alpha_bar(l)`` for ``l`` in [0, 1].

    The numerator is the variant's decay curve; the denominator cancels the
    DC gain ``tap_sum ** n`` that ``n`` applications of H put on a constant
    image, with ``n = ceil(steps * l)``.  ``exponent="literal"`` raises the tap
    sum to ``2 * stride ** n`` instead, for comparison only; it does not give
    ``alpha_bar(0) == 1``.
    """

    steps: int
    stride: int = 2
    tap_sum: float = 2.0
    variant: str = "udpm-sine"
    exponent: str = "levels"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown schedule variant {self.variant!r}; expected one of {VARIANTS}")
        if self.exponent not in EXPONENTS:
            raise ValueError(f"unknown exponent mode {self.exponent!r}; expected one of {EXPONENTS}")
        if self.tap_sum <= 0:
            raise ValueError("tap_sum must be positive")

    @classmethod
    def for_kernel(cls, kernel, steps: int, variant: str = "udpm-sine", exponent: str = "levels") -> Schedule:
        return cls(steps=steps, stride=kernel.stride, tap_sum=kernel.tap_sum, variant=variant, exponent=exponent)

    def level_count(self, l: float) -> int:
        """Number of H applications at level ``l``: ``ceil(steps * l)``."""
        _check_level(l)
        # round first so k/L grid points land on k, not k+1
        return int(math.ceil(round(self.steps * l, 9)))

    def level_info(self, l: float) -> LevelInfo:
        n = self.level_count(l)
        return LevelInfo(l=l, n=n, factor=self.stride**n)

    def numerator(self, l: float) -> float:
        _check_level(l)
        if self.variant == "udpm-sine":
            return 1.0 - math.sin(0.5 * math.pi * l)
        if self.variant == "cosine":
            return math.cos(0.5 * math.pi * l)
        return 1.0 - l

    def alpha_bar(self, l: float) -> float:
        n = self.level_count(l)
        power = 2 * n if self.exponent == "levels" else 2 * self.stride**n
        if l == 1.0:
            return 0.0
        return self.numerator(l) / self.tap_sum**power

    def discretize(self) -> Discretization:
        L = self.steps
        alpha_bar = np.array([1.0] + [self.alpha_bar(k / L) for k in range(1, L + 1)])
        alpha = alpha_bar[1:] / alpha_bar[:-1]
        return Discretization(alpha_bar=alpha_bar, alpha=alpha, beta=1.0 - alpha)

    def metadata(self) -> dict:
        return {
            "variant": self.variant,
            "steps": self.steps,
            "stride": self.stride,
            "tap_sum": self.tap_sum,
            "exponent": self.exponent,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> Schedule:
        return cls(
            steps=int(meta["steps"]),
            stride=int(meta["stride"]),
            tap_sum=float(meta["tap_sum"]),
            variant=meta.get("variant", "udpm-sine"),
            exponent=meta.get("exponent", "levels"),
        )


@dataclass(frozen=True)
class LevelInfo:
    l: float
    n: int
    factor: int


@dataclass(frozen=True)
class Discretization:
    """Per-step coefficients.

    ``alpha_bar`` has ``L + 1`` entries with ``alpha_bar[0] == 1`` (empty
    product); ``alpha[k - 1]`` and ``beta[k - 1]`` belong to step ``k``.
    """

    alpha_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alpha)

    def coefficients(self, k: int) -> tuple[float, float, float, float]:
        """``(alpha_k, beta_k, alpha_bar_k, alpha_bar_{k-1})`` for step ``k`` in 1..L."""
        if not 1 <= k <= self.steps:
            raise ValueError(f"step {k} outside 1..{self.steps}")
        return (
            float(self.alpha[k - 1]),
            float(self.beta[k - 1]),
            float(self.alpha_bar[k]),
            float(self.alpha_bar[k - 1]),
        )


def alpha_bar(schedule: Schedule, l: float) -> float:
    return schedule.alpha_bar(l)


def discretize(schedule: Schedule) -> Discretization:
    return schedule.discretize()


def steps_for_size(height: int, width: int, stride: int) -> int:
    """Step count that leaves a ``stride x stride`` coarsest latent: ``log_stride(min(H, W)) - 1``."""
    if stride < 2:
        raise ValueError("steps_for_size needs stride >= 2")
    m = min(height, width)
    power, v = 0, 1
    while v < m:
        v *= stride
        power += 1
    if v != m:
        raise ValueError(f"min dimension {m} is not a power of {stride}")
    if power < 2:
        raise ValueError(f"min dimension {m} must be at least {stride}**2")
    return power - 1


def _check_level(l: float) -> None:
    if not 0.0 <= l <= 1.0:
        raise ValueError(f"level must lie in [0, 1], got {l}")
