"""Blur-and-subsample degradation operator H, its adjoint and Gram operator.

All operators act circularly on the last two axes of an array, so a batch of
multi-channel images ``(..., C, H, W)`` is handled in one call.  Output sample
``j`` of :func:`downsample` reads the input window whose top-left corner is at
``stride * j``::

    y[j1, j2] = sum_{p, q} w[p, q] * x[(s*j1 + p) % H, (s*j2 + q) % W]

With ``taps.shape <= (stride, stride)`` the windows of distinct outputs never
overlap, which is what makes ``H H^T = ||w||^2 I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import dft2, idft2

PROJECTOR = "projector"
DFT_LITERAL = "dft-literal"
REPRESENTATIONS = (PROJECTOR, DFT_LITERAL)


class LemmaIncompatibleKernel(ValueError):
    """Raised when a code path needs non-overlapping kernel windows."""


@dataclass(frozen=True, eq=False)
class Kernel:
    taps: np.ndarray
    stride: int

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim == 1:
            taps = taps[None, :]
        if taps.ndim != 2 or taps.size == 0:
            raise ValueError(f"kernel taps must be a non-empty 2D array, got shape {taps.shape}")
        if int(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def lemma_compatible(self) -> bool:
        kh, kw = self.taps.shape
        return kh <= self.stride and kw <= self.stride

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.taps**2))

    @property
    def tap_sum(self) -> float:
        return float(np.sum(self.taps))

    def is_unit_norm(self, tol: float = 1e-12) -> bool:
        return abs(np.sqrt(self.norm_sq) - 1.0) <= tol

    def require_lemma_compatible(self) -> None:
        if not self.lemma_compatible:
            raise LemmaIncompatibleKernel(
                f"kernel support {self.taps.shape} exceeds stride {self.stride}; "
                "output windows overlap and H H^T is not a multiple of I"
            )

    def scaled(self, factor: float) -> Kernel:
        return Kernel(self.taps * factor, self.stride)


def make_box_kernel(stride: int) -> Kernel:
    """``stride x stride`` box filter normalized to unit l2 norm (every tap ``1/stride``)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return Kernel(np.full((stride, stride), 1.0 / stride), stride)


def _check_divisible(shape, factor: int, what: str = "input") -> None:
    h, w = shape[-2], shape[-1]
    if h % factor or w % factor:
        raise ValueError(
            f"{what} spatial size {h}x{w} is not divisible by {factor}"
        )


def downsample(x: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Apply H: circular correlation with the taps then keep every stride-th sample."""
    x = np.asarray(x)
    s = kernel.stride
    _check_divisible(x.shape, s)
    out = None
    for (p, q), w in np.ndenumerate(kernel.taps):
        if w == 0.0:
            continue
        term = w * np.roll(x, (-p, -q), axis=(-2, -1))[..., ::s, ::s]
        out = term if out is None else out + term
    if out is None:
        out = np.zeros(x.shape[:-2] + (x.shape[-2] // s, x.shape[-1] // s), dtype=x.dtype)
    return out


def adjoint(y: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Apply H^T: zero-fill onto the fine grid, then correlate with the flipped taps."""
    y = np.asarray(y)
    s = kernel.stride
    fine = y.shape[:-2] + (y.shape[-2] * s, y.shape[-1] * s)
    out = None
    for (p, q), w in np.ndenumerate(kernel.taps):
        if w == 0.0:
            continue
        up = np.zeros(fine, dtype=y.dtype)
        up[..., ::s, ::s] = w * y
        term = np.roll(up, (p, q), axis=(-2, -1))
        out = term if out is None else out + term
    if out is None:
        out = np.zeros(fine, dtype=y.dtype)
    return out


def downsample_n(x: np.ndarray, kernel: Kernel, n: int) -> np.ndarray:
    """H applied ``n`` times; ``n == 0`` returns ``x`` unchanged."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    x = np.asarray(x)
    _check_divisible(x.shape, kernel.stride**n)
    for _ in range(n):
        x = downsample(x, kernel)
    return x


def adjoint_n(y: np.ndarray, kernel: Kernel, n: int) -> np.ndarray:
    """(H^n)^T = (H^T)^n."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    y = np.asarray(y)
    for _ in range(n):
        y = adjoint(y, kernel)
    return y


def gram_filter_polyphase(kernel: Kernel) -> Kernel:
    """Autocorrelation of the taps kept at lags that are multiples of the stride.

    Returned as a stride-1 kernel centred at index ``(ch, cw)`` with
    ``ch = (kh - 1) // stride``, i.e. the tap for lag ``(i, j) * stride``
    sits at ``[ch + i, cw + j]``.
    """
    w = kernel.taps
    kh, kw = w.shape
    s = kernel.stride
    # full[dy + kh - 1, dx + kw - 1] = sum_p w[p] w[p + d]
    full = np.zeros((2 * kh - 1, 2 * kw - 1))
    for dy in range(-(kh - 1), kh):
        for dx in range(-(kw - 1), kw):
            a = w[max(0, -dy):kh - max(0, dy), max(0, -dx):kw - max(0, dx)]
            b = w[max(0, dy):kh - max(0, -dy), max(0, dx):kw - max(0, -dx)]
            full[dy + kh - 1, dx + kw - 1] = np.sum(a * b)
    ch, cw = (kh - 1) // s, (kw - 1) // s
    rows = np.arange(-ch, ch + 1) * s + kh - 1
    cols = np.arange(-cw, cw + 1) * s + kw - 1
    return Kernel(full[np.ix_(rows, cols)], 1)


def _embed_centered(h: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Place a centred filter on a circular grid with its centre at (0, 0)."""
    H, W = grid
    out = np.zeros((H, W))
    ch, cw = (h.shape[0] - 1) // 2, (h.shape[1] - 1) // 2
    for (i, j), v in np.ndenumerate(h):
        out[(i - ch) % H, (j - cw) % W] += v
    return out


@dataclass(frozen=True, eq=False)
class GramDescriptor:
    """H^T H on a fixed fine grid, in one of two representations.

    ``projector`` evaluates ``adjoint(downsample(x))`` and is exact.
    ``dft-literal`` multiplies the spectrum by the DFT of the subsampled
    autocorrelation filter, which for non-overlapping kernels is the unit
    impulse; it is kept to measure how far that recipe is from H^T H.
    """

    kernel: Kernel
    grid: tuple[int, int]
    representation: str = PROJECTOR
    _spectrum: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(
                f"unknown Gram representation {self.representation!r}; "
                f"expected one of {REPRESENTATIONS}"
            )
        grid = (int(self.grid[0]), int(self.grid[1]))
        _check_divisible(grid, self.kernel.stride, "Gram grid")
        object.__setattr__(self, "grid", grid)
        if self.representation == DFT_LITERAL:
            h = gram_filter_polyphase(self.kernel).taps
            object.__setattr__(self, "_spectrum", dft2(_embed_centered(h, grid)))

    @property
    def spectrum(self) -> np.ndarray:
        """DFT of the literal Gram filter (dft-literal representation only)."""
        if self._spectrum is None:
            raise ValueError("spectrum is only defined for the dft-literal representation")
        return self._spectrum

    @property
    def scale(self) -> float:
        """Eigenvalue of H^T H on its range (``||w||^2``)."""
        return self.kernel.norm_sq


def gram_apply(x: np.ndarray, gram: GramDescriptor) -> np.ndarray:
    """H^T H x in the descriptor's representation."""
    x = np.asarray(x)
    if x.shape[-2:] != gram.grid:
        raise ValueError(f"input grid {x.shape[-2:]} does not match descriptor grid {gram.grid}")
    if gram.representation == PROJECTOR:
        return adjoint(downsample(x, gram.kernel), gram.kernel)
    if gram.representation == DFT_LITERAL:
        return idft2(gram.spectrum * dft2(x)).astype(x.dtype, copy=False)
    raise ValueError(f"unknown Gram representation {gram.representation!r}")
