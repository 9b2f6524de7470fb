"""x0-predictors: a small convolutional network with exact manual gradients, and an oracle.

Network layout (fixed)::

    up  = bilinear(x_l -> full resolution)
    e   = sinusoidal(l) + class_table[class]            # (B, E)
    h1  = relu(conv(up, W1) + b1 + T1 e)
    h2  = relu(conv(h1, W2) + b2 + T2 e)
    h3  = relu(conv(h2, W3) + b3 + T3 e)
    out = up + conv(h3, W4) + b4 + T4 e

Convolutions are 3x3 cross-correlations with circular padding.  The last
layer starts at zero so a fresh network returns the upsampled input.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

EMBED_DIM = 32
_FREQS = math.pi * 2.0 ** np.arange(EMBED_DIM // 2)
_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass(frozen=True)
class Architecture:
    channels: int
    resolution: tuple[int, int]
    width: int = 32
    depth: int = 4
    embed_dim: int = EMBED_DIM
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if self.embed_dim != EMBED_DIM:
            raise ValueError(f"embed_dim is fixed at {EMBED_DIM}")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def conditional(self) -> bool:
        return self.num_classes > 0

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.channels] + [self.width] * (self.depth - 1) + [self.channels]
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def time_embedding(levels) -> np.ndarray:
    """(B,) levels -> (B, 32) features ``[sin(pi 2^k l), cos(pi 2^k l)]``, k = 0..15."""
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    ang = levels[:, None] * _FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres, edge samples replicated
    f = n_out / n_in
    src = (np.arange(n_out) + 0.5) / f - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1.0 - t
    m[np.arange(n_out), i1] += t
    return m


def bilinear_upsample(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``x`` to ``size``; integer factors only."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    H, W = size
    if H % h or W % w:
        raise ValueError(f"input grid {h}x{w} does not divide target resolution {H}x{W}")
    if (h, w) == (H, W):
        return x.copy()
    mh = _interp_matrix(H, h).astype(x.dtype)
    mw = _interp_matrix(W, w).astype(x.dtype)
    return np.einsum("Hh,...hw,Ww->...HW", mh, x, mw, optimize=True)


def _shifted(h: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, 9, C, H, W); slot k holds h[y + dy, x + dx]
    return np.stack([np.roll(h, (-dy, -dx), axis=(-2, -1)) for dy, dx in _OFFSETS], axis=1)


def _unshift_sum(g: np.ndarray) -> np.ndarray:
    # adjoint of _shifted
    out = np.roll(g[:, 0], _OFFSETS[0], axis=(-2, -1))
    for k in range(1, len(_OFFSETS)):
        out = out + np.roll(g[:, k], _OFFSETS[k], axis=(-2, -1))
    return out


def init_params(arch: Architecture, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Conv weights uniform in +-1/sqrt(9 * fan_in), zero biases, zero final layer."""
    params = {}
    layers = arch.layer_shapes()
    for i, (cin, cout) in enumerate(layers, start=1):
        last = i == len(layers)
        bound = 1.0 / math.sqrt(9 * cin)
        if last:
            params[f"conv{i}.weight"] = np.zeros((cout, cin, 3, 3))
            params[f"time{i}.weight"] = np.zeros((cout, arch.embed_dim))
        else:
            params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            tb = 1.0 / math.sqrt(arch.embed_dim)
            params[f"time{i}.weight"] = rng.uniform(-tb, tb, (cout, arch.embed_dim))
        params[f"conv{i}.bias"] = np.zeros(cout)
    if arch.conditional:
        params["class_embed"] = 0.1 * rng.standard_normal((arch.num_classes + 1, arch.embed_dim))
    return {k: v.astype(dtype) for k, v in params.items()}


@dataclass
class ForwardCache:
    inputs: list
    shifted: list
    pre: list
    embed: np.ndarray
    classes: np.ndarray | None


class ConvDenoiser:
    """Trainable x0-predictor with hand-derived gradients.

    ``params`` maps names to arrays and is updated in place by the optimizer.
    """

    def __init__(self, arch: Architecture, params: dict | None = None, seed: int = 0, dtype=np.float64):
        self.arch = arch
        if params is None:
            params = init_params(arch, np.random.default_rng(seed), dtype)
        self.params = params

    @property
    def dtype(self):
        return self.params["conv1.weight"].dtype

    def _classes(self, class_id, batch: int):
        if not self.arch.conditional:
            if class_id is not None and np.any(np.asarray(class_id) != -1):
                raise ValueError("class conditioning requested on an unconditional denoiser")
            return None
        if class_id is None:
            return np.full(batch, self.arch.null_class, dtype=np.int64)
        ids = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (batch,)).copy()
        ids[ids == -1] = self.arch.null_class
        if np.any(ids < 0) or np.any(ids > self.arch.null_class):
            raise ValueError(f"unknown class id in {ids.tolist()} (classes 0..{self.arch.num_classes - 1})")
        return ids

    def forward(self, x, level, class_id=None) -> tuple[np.ndarray, ForwardCache]:
        """Batched forward pass on ``x`` of shape (B, C, h, w); returns (output, cache)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.arch.channels:
            raise ValueError(f"expected (B, {self.arch.channels}, h, w) input, got {x.shape}")
        B = x.shape[0]
        levels = np.broadcast_to(np.asarray(level, dtype=np.float64), (B,))
        if np.any(levels <= 0.0) or np.any(levels > 1.0):
            raise ValueError("denoiser levels must lie in (0, 1]")
        up = bilinear_upsample(x, self.arch.resolution)
        emb = time_embedding(levels)
        classes = self._classes(class_id, B)
        if classes is not None:
            emb = emb + self.params["class_embed"][classes]
        emb = emb.astype(self.dtype)

        n_layers = len(self.arch.layer_shapes())
        inputs, shifted, pre = [], [], []
        h = up
        for i in range(1, n_layers + 1):
            w = self.params[f"conv{i}.weight"]
            xs = _shifted(h)
            z = np.einsum("bkchw,ock->bohw", xs, w.reshape(w.shape[0], w.shape[1], 9), optimize=True)
            z = z + self.params[f"conv{i}.bias"][None, :, None, None]
            z = z + (emb @ self.params[f"time{i}.weight"].T)[:, :, None, None]
            inputs.append(h)
            shifted.append(xs)
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n_layers else z
        out = up + h
        return out, ForwardCache(inputs, shifted, pre, emb, classes)

    def backward(self, cache: ForwardCache | None, grad_out) -> dict:
        """Parameter gradients of ``sum(grad_out * output)`` for the cached forward pass."""
        if cache is None:
            raise ValueError("backward needs the cache returned by forward")
        g = np.asarray(grad_out, dtype=self.dtype)
        n_layers = len(cache.pre)
        grads = {}
        g_emb = np.zeros_like(cache.embed)
        for i in range(n_layers, 0, -1):
            if i < n_layers:
                g = g * (cache.pre[i - 1] > 0)
            w = self.params[f"conv{i}.weight"]
            cout, cin = w.shape[:2]
            xs = cache.shifted[i - 1]
            grads[f"conv{i}.weight"] = np.einsum("bkchw,bohw->ock", xs, g, optimize=True).reshape(w.shape)
            gsum = g.sum(axis=(2, 3))
            grads[f"conv{i}.bias"] = gsum.sum(axis=0)
            grads[f"time{i}.weight"] = gsum.T @ cache.embed
            g_emb = g_emb + gsum @ self.params[f"time{i}.weight"]
            if i > 1:
                gxs = np.einsum("ock,bohw->bkchw", w.reshape(cout, cin, 9), g, optimize=True)
                g = _unshift_sum(gxs)
        if self.arch.conditional:
            gc = np.zeros_like(self.params["class_embed"])
            np.add.at(gc, cache.classes, g_emb)
            grads["class_embed"] = gc
        return grads

    def predict(self, x_l, level, class_id=None) -> np.ndarray:
        """Full-resolution x0 estimate for one image (C, h, w) or a batch (B, C, h, w)."""
        x_l = np.asarray(x_l)
        single = x_l.ndim == 3
        out, _ = self.forward(x_l[None] if single else x_l, level, class_id)
        return out[0] if single else out

    __call__ = predict

    def copy(self) -> ConvDenoiser:
        return ConvDenoiser(self.arch, {k: v.copy() for k, v in self.params.items()})


class OracleDenoiser:
    """Test double returning the true ``x0`` whatever the input."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0)

    def predict(self, x_l, level=None, class_id=None) -> np.ndarray:
        x_l = np.asarray(x_l)
        if x_l.ndim == 4:
            return np.broadcast_to(self.x0, (x_l.shape[0],) + self.x0.shape).copy()
        return self.x0.copy()

    __call__ = predict


def oracle_predict(x0_true, x_l=None, level=None, class_id=None) -> np.ndarray:
    return np.array(x0_true, copy=True)


@dataclass
class EmaState:
    shadow: dict
    decay: float
    updates: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params: dict, decay: float) -> EmaState:
        return cls({k: v.copy() for k, v in params.items()}, decay)


def ema_update(ema: EmaState, live: dict) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * live``, returned as a new state."""
    if set(ema.shadow) != set(live):
        raise ValueError("EMA shadow and live parameters have different names")
    new = {}
    for name, s in ema.shadow.items():
        p = live[name]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {s.shape} vs {p.shape}")
        new[name] = p.copy() if ema.decay == 0.0 else s + (1.0 - ema.decay) * (p - s)
    return EmaState(new, ema.decay, ema.updates + 1)
