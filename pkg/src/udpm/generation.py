"""Ancestral sampling with structured posteriors, guidance and full latent capture."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .degrade import PROJECTOR, Kernel
from .diffusion import posterior_params, posterior_sample
from .schedule import Schedule
from .tensor import ImageTensor, RngStream


@dataclass
class LatentRecord:
    """All noise maps of one generation run.

    ``noises[l]`` has the shape of ``x_l`` for ``l = 1..L``: ``noises[L]`` is
    the initial coarse draw and ``noises[l - 1]`` is the posterior noise drawn
    at reverse step ``l``.  The final step emits its mean, so every map
    influences the output.
    """

    noises: dict
    schedule: dict
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.noises)

    def shapes(self) -> dict:
        return {l: tuple(e.shape) for l, e in self.noises.items()}

    def copy(self) -> LatentRecord:
        return LatentRecord(
            {l: e.copy() for l, e in self.noises.items()}, dict(self.schedule), self.seed, dict(self.meta)
        )

    def compatible_with(self, other: LatentRecord) -> bool:
        return self.schedule == other.schedule and self.shapes() == other.shapes()


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")


def _predict(model, x, level, class_id=None):
    fn = getattr(model, "predict", model)
    return np.asarray(fn(x, level, class_id))


def cfg_predict(model, x_l, level: float, guidance: GuidanceConfig) -> np.ndarray:
    """Classifier-free mix ``(1 - g) * f_uncond + g * f_cond`` of two predictions.

    Written in this form so ``g = 0`` and ``g = 1`` return the unconditional
    and conditional predictions bit for bit.
    """
    arch = getattr(model, "arch", None)
    if arch is not None and not arch.conditional:
        raise ValueError("guided prediction requested from an unconditional model")
    f_u = _predict(model, x_l, level, None)
    f_c = _predict(model, x_l, level, guidance.class_id)
    g = guidance.scale
    return (1.0 - g) * f_u + g * f_c


def sample(
    model,
    schedule: Schedule,
    kernel: Kernel,
    shape: tuple[int, int, int] | None = None,
    rng: RngStream | None = None,
    record: LatentRecord | None = None,
    guidance: GuidanceConfig | None = None,
    class_id: int | None = None,
    representation: str = PROJECTOR,
    zero_noise: bool = False,
    trace: list | None = None,
    dtype=np.float64,
) -> tuple[ImageTensor, LatentRecord]:
    """Run the reverse chain from pure noise to a full-resolution image.

    ``model`` is any callable or object with ``predict(x_l, l, class_id)``.
    Noise comes from ``record`` when given (replay) and from ``rng``
    otherwise.  ``zero_noise`` replaces every posterior draw with zeros.
    Intermediate ``x_l`` arrays are appended to ``trace`` from ``l = L`` down
    to 0.
    """
    if shape is None:
        arch = getattr(model, "arch", None)
        if arch is None:
            raise ValueError("sample needs an explicit shape for models without an architecture")
        shape = (arch.channels,) + tuple(arch.resolution)
    C, H, W = shape
    L = schedule.steps
    s = kernel.stride
    if schedule.stride != s:
        raise ValueError(f"schedule stride {schedule.stride} does not match kernel stride {s}")
    if H % s**L or W % s**L:
        raise ValueError(f"resolution {H}x{W} is not divisible by {s}**{L}")
    grids = {l: (C, H // s**l, W // s**l) for l in range(0, L + 1)}

    if record is not None:
        if record.shapes() != {l: grids[l] for l in range(1, L + 1)}:
            raise ValueError(f"latent record shapes {record.shapes()} do not fit this schedule/resolution")
        if record.schedule != schedule.metadata():
            raise ValueError("latent record was produced with a different schedule")
    elif rng is None:
        raise ValueError("sample needs an rng or a latent record")

    def draw(l):
        if record is not None:
            return np.asarray(record.noises[l], dtype=dtype)
        if zero_noise and l < L:
            return np.zeros(grids[l], dtype=dtype)
        return rng.normal(grids[l], dtype=dtype)

    def predict(x, level):
        if guidance is not None:
            return cfg_predict(model, x, level, guidance)
        return _predict(model, x, level, class_id)

    disc = schedule.discretize()
    noises = {L: draw(L)}
    x = noises[L]
    if trace is not None:
        trace.append(x)
    for l in range(L, 0, -1):
        x0_hat = predict(x, l / L)
        p = posterior_params(x, x0_hat, l, schedule, kernel, representation, disc)
        if l > 1:
            e = draw(l - 1)
            x, _ = posterior_sample(p, noise=e)
            noises[l - 1] = e
        else:
            x, _ = posterior_sample(p)
        if trace is not None:
            trace.append(x)

    meta = {}
    if guidance is not None:
        meta["guidance"] = {"scale": guidance.scale, "class_id": guidance.class_id}
    elif class_id is not None:
        meta["class_id"] = class_id
    out_record = record.copy() if record is not None else LatentRecord(
        noises, schedule.metadata(), rng.seed if rng is not None else None, meta
    )
    return ImageTensor(x), out_record


def sample_many(model, schedule: Schedule, kernel: Kernel, seed: int, count: int, threads: int | None = None, **kwargs):
    """``count`` samples, sample ``i`` drawn from stream ``(seed, i)``.

    Results do not depend on the thread count; ``UDPM_THREADS`` caps it.
    """
    if threads is None:
        threads = int(os.environ.get("UDPM_THREADS", "1"))
    threads = max(1, min(threads, count))

    def one(i):
        return sample(model, schedule, kernel, rng=RngStream(seed, i), **kwargs)

    if threads == 1:
        return [one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(count)))
