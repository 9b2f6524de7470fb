"""Stochastic training: losses, Adam, toy datasets and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .degrade import Kernel, adjoint_n, downsample_n, make_box_kernel
from .denoiser import Architecture, ConvDenoiser, EmaState, ema_update
from .diffusion import PosteriorParams, covariance_params, forward_marginal_sample, sigma_apply
from .schedule import Schedule
from .tensor import RngStream

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("simple", "sigma-weighted")
GENERATORS = ("blobs", "bars")


class ConfigError(ValueError):
    """Invalid or incomplete training configuration."""


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses


def loss_simple(x0_hat, x0) -> float:
    """Sum (not mean) of squared differences."""
    x0_hat, x0 = np.asarray(x0_hat), np.asarray(x0)
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x0_hat.shape} vs {x0.shape}")
    d = x0_hat - x0
    return float(np.sum(d * d))


def loss_simple_grad(x0_hat, x0) -> np.ndarray:
    return 2.0 * (np.asarray(x0_hat) - np.asarray(x0))


def loss_sigma_weighted(x0_hat, x0, p: PosteriorParams, level: int) -> float:
    """``d^T Sigma_level d`` with ``d = H^(level-1) (x0_hat - x0)``."""
    x0_hat, x0 = np.asarray(x0_hat), np.asarray(x0)
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x0_hat.shape} vs {x0.shape}")
    d = downsample_n(x0_hat - x0, p.gram.kernel, level - 1)
    if d.shape[-2:] != p.gram.grid:
        raise ValueError(f"level {level} residual grid {d.shape[-2:]} does not match covariance grid {p.gram.grid}")
    return float(np.sum(d * sigma_apply(p, d)))


def loss_sigma_weighted_grad(x0_hat, x0, p: PosteriorParams, level: int) -> np.ndarray:
    k = p.gram.kernel
    d = downsample_n(np.asarray(x0_hat) - np.asarray(x0), k, level - 1)
    return 2.0 * adjoint_n(sigma_apply(p, d), k, level - 1)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    Order: ``m <- b1 m + (1-b1) g``; ``v <- b2 v + (1-b2) g^2``;
    ``p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)``.
    """
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# toy data


@dataclass(frozen=True)
class ToyDataset:
    """Deterministic synthetic images in [0, 1].

    ``blobs``: one to three Gaussian bumps with random centres, widths and
    amplitudes.  ``bars``: stripes, horizontal for class 0 and vertical for
    class 1.  Image ``i`` only depends on ``(generator, seed, i)``.
    """

    generator: str = "blobs"
    size: int = 16
    channels: int = 1
    num_classes: int = 0
    count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown dataset generator {self.generator!r}; expected one of {GENERATORS}")
        if self.generator == "bars" and self.num_classes not in (0, 2):
            raise ConfigError("bars dataset has exactly 2 classes")
        if self.count < 1 or self.size < 1 or self.channels < 1:
            raise ConfigError("dataset count, size and channels must be positive")

    def __len__(self) -> int:
        return self.count

    def label(self, index: int) -> int | None:
        if self.generator == "bars":
            return index % 2 if self.num_classes else None
        return index % self.num_classes if self.num_classes else None

    def image(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        g = RngStream(self.seed, index).generator
        n = self.size
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        img = np.zeros((self.channels, n, n))
        if self.generator == "blobs":
            for _ in range(int(g.integers(1, 4))):
                cy, cx = g.uniform(0, n, 2)
                width = g.uniform(n / 10, n / 5)
                amp = g.uniform(0.5, 1.0, self.channels)
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
                img += amp[:, None, None] * bump[None]
        else:
            period = n / float(g.choice([2, 4]))
            phase = g.uniform(0, 2 * np.pi)
            coord = yy if index % 2 == 0 else xx
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + phase)
            img += stripes[None] * g.uniform(0.7, 1.0, self.channels)[:, None, None]
        return np.clip(img, 0.0, 1.0)

    def __getitem__(self, index: int):
        return self.image(index), self.label(index)


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    dataset: ToyDataset
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9999
    class_drop: float = 0.1
    loss: str = "simple"
    seed: int = 0
    diffusion_steps: int | None = None
    stride: int = 2
    schedule: str = "udpm-sine"
    width: int = 32
    precision: int = 32
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_VARIANTS}")
        if not 0.0 <= self.class_drop <= 1.0:
            raise ConfigError("class_drop must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps, batch_size and lr must be positive")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def kernel(self) -> Kernel:
        return make_box_kernel(self.stride)

    def make_schedule(self) -> Schedule:
        L = self.diffusion_steps
        if L is None:
            from .schedule import steps_for_size

            L = steps_for_size(self.dataset.size, self.dataset.size, self.stride)
        return Schedule.for_kernel(self.kernel(), L, variant=self.schedule)

    def architecture(self) -> Architecture:
        return Architecture(
            channels=self.dataset.channels,
            resolution=(self.dataset.size, self.dataset.size),
            width=self.width,
            num_classes=self.dataset.num_classes,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = asdict(self.dataset)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        if "dataset" not in data:
            raise ConfigError("missing required field 'dataset'")
        ds = dict(data["dataset"])
        for required in ("generator", "size"):
            if required not in ds:
                raise ConfigError(f"missing required field 'dataset.{required}'")
        known_ds = {f.name for f in fields(ToyDataset)}
        unknown = set(ds) - known_ds
        if unknown:
            raise ConfigError(f"unknown dataset field(s): {sorted(unknown)}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        rest = {k: v for k, v in data.items() if k != "dataset"}
        try:
            return cls(dataset=ToyDataset(**ds), **rest)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: object
    ema: EmaState | None
    schedule: Schedule
    kernel: Kernel
    config: TrainConfig
    history: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    null_class_uses: int = 0
    class_uses: int = 0

    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


def train(config: TrainConfig, denoiser=None, out_dir=None, on_checkpoint=None) -> TrainResult:
    """Run the training loop.

    Each step draws ``batch_size`` images, a level ``l`` uniform in (0, 1] per
    image, optionally replaces the label by the null class, noises the image
    to ``x_l`` and takes one Adam step on the summed loss.  Gradients are
    accumulated over the batch left to right.  A denoiser without
    ``backward`` (e.g. the oracle) is only evaluated.
    """
    dataset = config.dataset
    kernel = config.kernel()
    schedule = config.make_schedule()
    disc = schedule.discretize()
    dtype = config.dtype
    if denoiser is None:
        denoiser = ConvDenoiser(config.architecture(), seed=config.seed, dtype=dtype)
    trainable = hasattr(denoiser, "backward")
    ema = EmaState.from_params(denoiser.params, config.ema_decay) if trainable else None
    adam = AdamState.zeros_like(denoiser.params) if trainable else None

    data_rng = RngStream(config.seed, 1)
    level_rng = RngStream(config.seed, 2)
    drop_rng = RngStream(config.seed, 3)
    noise_rng = RngStream(config.seed, 4)
    conditional = dataset.num_classes > 0

    result = TrainResult(denoiser, ema, schedule, kernel, config)
    for step in range(1, config.steps + 1):
        total = 0.0
        grads = None
        step_levels = []
        for _ in range(config.batch_size):
            idx = int(data_rng.integers(0, len(dataset)))
            x0, label = dataset[idx]
            x0 = x0.astype(dtype)
            l = 1.0 - float(level_rng.uniform())
            step_levels.append(l)
            cls = None
            if conditional:
                if drop_rng.uniform() < config.class_drop:
                    result.null_class_uses += 1
                else:
                    cls = label
                    result.class_uses += 1
            x_l = forward_marginal_sample(x0, l, schedule, kernel, noise_rng)
            if trainable:
                out, cache = denoiser.forward(x_l[None], l, cls)
                out = out[0]
            else:
                out = denoiser.predict(x_l, l, cls)
            if config.loss == "simple":
                loss = loss_simple(out, x0)
                g_out = loss_simple_grad(out, x0) if trainable else None
            else:
                n = schedule.level_count(l)
                grid = (x0.shape[-2] // kernel.stride ** (n - 1), x0.shape[-1] // kernel.stride ** (n - 1))
                cov = covariance_params(n, schedule, kernel, grid, coefficients=disc)
                loss = loss_sigma_weighted(out, x0, cov, n)
                g_out = loss_sigma_weighted_grad(out, x0, cov, n) if trainable else None
            if not math.isfinite(loss):
                _dump_divergence(out_dir, step, l, idx, loss)
                raise TrainingDiverged(f"non-finite loss {loss} at step {step} (image {idx}, level {l:.6f})")
            total += loss
            if trainable:
                g = denoiser.backward(cache, g_out[None])
                grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        result.levels.extend(step_levels)
        if trainable:
            new_params, adam = adam_step(denoiser.params, grads, adam, config.lr, config.beta1, config.beta2, config.eps)
            denoiser.params.update(new_params)
            ema = ema_update(ema, denoiser.params)
            result.ema = ema
        result.history.append(
            {"step": step, "loss": total / config.batch_size, "l": float(np.mean(step_levels)), "ema": trainable}
        )
        if config.checkpoint_every and step % config.checkpoint_every == 0 and on_checkpoint is not None:
            on_checkpoint(result, step)
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, result.history[-1]["loss"])
    return result


def _dump_divergence(out_dir, step, l, idx, loss) -> None:
    if out_dir is None:
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "diverged.json", "w") as fh:
        json.dump({"step": step, "level": l, "image": idx, "loss": repr(loss)}, fh, indent=2)
