"""Forward noising, structured Gaussian posteriors and the variational bound.

Grid bookkeeping: ``x_l`` lives on the grid reduced by ``stride ** l``.  The
posterior of step ``l`` produces ``x_{l-1}`` one grid finer, with covariance

    Sigma_l = (a * H^T H + b * I)^{-1},  a = alpha_l / beta_l,  b = 1 / (1 - alpha_bar_{l-1})

For non-overlapping kernels ``H^T H = c * Q`` with ``Q`` an orthogonal
projector and ``c = ||w||^2``, so ``Sigma_l`` has two eigenvalues,
``1/b`` on the complement of ``Q`` and ``1/(a*c + b)`` on its range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .degrade import (
    DFT_LITERAL,
    PROJECTOR,
    GramDescriptor,
    Kernel,
    adjoint,
    downsample,
    downsample_n,
    gram_apply,
)
from .schedule import Schedule
from .tensor import RngStream, dft2, idft2


def forward_marginal_sample(x0, l: float, schedule: Schedule, kernel: Kernel, rng: RngStream, noise=None):
    """Draw ``x_l ~ q(x_l | x_0)`` at continuous level ``l`` in [0, 1].

    Returns ``sqrt(abar) * H^n x0 + sqrt(1 - abar) * e`` where ``n`` is the
    level count of ``l``.  Pass ``noise`` to reuse a draw.
    """
    x0 = np.asarray(x0)
    if not 0.0 <= l <= 1.0:
        raise ValueError(f"forward sampling needs l in [0, 1], got {l}")
    n = schedule.level_count(l)
    abar = schedule.alpha_bar(l)
    if abar == 1.0:
        return np.array(x0, copy=True)
    signal = downsample_n(x0, kernel, n)
    if noise is None:
        noise = rng.normal(signal.shape, dtype=x0.dtype)
    return math.sqrt(abar) * signal + math.sqrt(1.0 - abar) * noise


def forward_step_sample(x_prev, kernel: Kernel, beta: float, rng: RngStream, noise=None):
    """One forward transition ``sqrt(1 - beta) * H x_prev + sqrt(beta) * e``."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    hx = downsample(np.asarray(x_prev), kernel)
    if noise is None:
        noise = rng.normal(hx.shape, dtype=hx.dtype)
    return math.sqrt(1.0 - beta) * hx + math.sqrt(beta) * noise


@dataclass(frozen=True, eq=False)
class PosteriorParams:
    mu: np.ndarray
    a: float
    b: float
    gram: GramDescriptor
    level: int

    @property
    def deterministic(self) -> bool:
        """True at the final step, where the covariance collapses to zero."""
        return math.isinf(self.b)

    def eigenvalues(self) -> tuple[float, float]:
        """(complement, range) eigenvalues of Sigma in the projector representation."""
        c = self.gram.scale
        return 1.0 / self.b, 1.0 / (self.a * c + self.b)


def _range_project(v, gram: GramDescriptor):
    # orthogonal projection onto range(H^T)
    pv = gram_apply(v, gram)
    c = gram.scale
    return pv if c == 1.0 else pv / c


def _require_projector_kernel(gram: GramDescriptor) -> None:
    if gram.representation == PROJECTOR:
        gram.kernel.require_lemma_compatible()


def covariance_params(
    level: int,
    schedule: Schedule,
    kernel: Kernel,
    fine_grid: tuple[int, int],
    representation: str = PROJECTOR,
    coefficients=None,
) -> PosteriorParams:
    """Sigma_level on ``fine_grid`` (the grid of ``x_{level-1}``) with a zero mean."""
    L = schedule.steps
    if not 1 <= level <= L:
        raise ValueError(f"level {level} outside 1..{L}")
    gram = GramDescriptor(kernel, fine_grid, representation)
    _require_projector_kernel(gram)
    disc = coefficients if coefficients is not None else schedule.discretize()
    alpha, beta, _, abar_prev = disc.coefficients(level)
    b = math.inf if level == 1 else 1.0 / (1.0 - abar_prev)
    return PosteriorParams(mu=np.zeros(fine_grid), a=alpha / beta, b=b, gram=gram, level=level)


def posterior_params(
    x_l,
    x0_hat,
    level: int,
    schedule: Schedule,
    kernel: Kernel,
    representation: str = PROJECTOR,
    coefficients=None,
) -> PosteriorParams:
    """Parameters of ``q(x_{level-1} | x_level, x0_hat)``.

    At ``level == 1`` the prior term is exact (``alpha_bar_0 = 1``), the
    covariance vanishes and the mean is ``x0_hat`` itself.
    """
    x_l = np.asarray(x_l)
    x0_hat = np.asarray(x0_hat)
    s = kernel.stride
    if x0_hat.shape[-2] % s**level or x0_hat.shape[-1] % s**level:
        raise ValueError(f"x0 grid {x0_hat.shape[-2:]} not divisible by {s}**{level}")
    fine_grid = (x0_hat.shape[-2] // s ** (level - 1), x0_hat.shape[-1] // s ** (level - 1))
    expected = (fine_grid[0] // s, fine_grid[1] // s)
    if x_l.shape[-2:] != expected:
        raise ValueError(f"x_{level} grid {x_l.shape[-2:]} does not match expected {expected}")
    disc = coefficients if coefficients is not None else schedule.discretize()
    cov = covariance_params(level, schedule, kernel, fine_grid, representation, disc)
    if cov.deterministic:
        return PosteriorParams(mu=np.array(x0_hat, copy=True), a=cov.a, b=cov.b, gram=cov.gram, level=level)

    alpha, beta, _, abar_prev = disc.coefficients(level)
    rhs = (math.sqrt(alpha) / beta) * adjoint(x_l, kernel) + (math.sqrt(abar_prev) * cov.b) * downsample_n(
        x0_hat, kernel, level - 1
    )
    return PosteriorParams(mu=sigma_apply(cov, rhs), a=cov.a, b=cov.b, gram=cov.gram, level=level)


def _literal_filter(p: PosteriorParams, power: float) -> np.ndarray:
    return (p.a * p.gram.spectrum + p.b) ** power


def sigma_apply(p: PosteriorParams, v):
    """Sigma_l v."""
    v = np.asarray(v)
    if p.gram.representation == DFT_LITERAL:
        return idft2(dft2(v) * _literal_filter(p, -1.0)).astype(v.dtype, copy=False)
    lo, hi = p.eigenvalues()
    qv = _range_project(v, p.gram)
    return lo * (v - qv) + hi * qv


def sigma_sqrt_apply(p: PosteriorParams, v):
    """Sigma_l^{1/2} v.

    The literal representation builds a filter with half the phase and the
    square-root magnitude of the Sigma filter's spectrum.
    """
    v = np.asarray(v)
    if p.gram.representation == DFT_LITERAL:
        spec = _literal_filter(p, -1.0)
        d = np.sqrt(np.abs(spec)) * np.exp(0.5j * np.arctan2(spec.imag, spec.real))
        return idft2(dft2(v) * d).astype(v.dtype, copy=False)
    lo, hi = p.eigenvalues()
    qv = _range_project(v, p.gram)
    return math.sqrt(lo) * (v - qv) + math.sqrt(hi) * qv


def sigma_inv_apply(p: PosteriorParams, v):
    """(a H^T H + b I) v."""
    v = np.asarray(v)
    return p.a * gram_apply(v, p.gram) + p.b * v


def posterior_sample(p: PosteriorParams, rng: RngStream | None = None, noise=None):
    """Draw ``mu + Sigma^{1/2} e``; returns ``(sample, e)``.

    Passing ``noise`` replays a stored draw; zeros give ``mu`` exactly.  When
    the covariance has collapsed (final step) ``mu`` is returned and no noise
    is consumed.
    """
    if p.deterministic:
        return np.array(p.mu, copy=True), None
    if noise is None:
        if rng is None:
            raise ValueError("posterior_sample needs an rng or explicit noise")
        noise = rng.normal(p.mu.shape, dtype=p.mu.dtype)
    noise = np.asarray(noise)
    if noise.shape != p.mu.shape:
        raise ValueError(f"noise shape {noise.shape} does not match posterior grid {p.mu.shape}")
    return p.mu + sigma_sqrt_apply(p, noise), noise


def kl_quadratic(mu_theta, mu, p: PosteriorParams) -> float:
    """Non-constant KL part ``0.5 * d^T Sigma^{-1} d`` with ``d = mu_theta - mu``."""
    d = np.asarray(mu_theta, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    if not np.any(d):
        return 0.0
    return 0.5 * float(np.sum(d * sigma_inv_apply(p, d)))


def sigma_logdet(p: PosteriorParams, channels: int = 1) -> float:
    """log det Sigma_l from its two-eigenvalue structure, per image of ``channels``."""
    H, W = p.gram.grid
    n = H * W
    r = n // p.gram.kernel.stride**2
    lo, hi = p.eigenvalues()
    return channels * ((n - r) * math.log(lo) + r * math.log(hi))


def gaussian_kl_isotropic(mean, var: float) -> float:
    """KL( N(0, I) || N(mean, var * I) )."""
    mean = np.asarray(mean, dtype=np.float64)
    n = mean.size
    return 0.5 * (n / var + float(np.sum(mean**2)) / var - n + n * math.log(var))


@dataclass
class ElboReport:
    prior_kl: float
    step_kl: dict
    reconstruction: float
    total: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_kl"] = {str(k): v for k, v in self.step_kl.items()}
        return d


def elbo_report(
    x0,
    denoiser,
    schedule: Schedule,
    kernel: Kernel,
    rng: RngStream,
    class_id=None,
    recon_prior_var: float = 1.0,
) -> ElboReport:
    """Single-sample estimate of the bound's terms for one image ``x0`` of shape (C, H, W).

    ``denoiser(x_l, l, class_id)`` predicts the full-resolution ``x0``.  Each
    per-step KL compares the model posterior with the true one under the
    shared covariance, so only the quadratic part survives.  The step-1
    covariance is singular, so the reconstruction term uses the step-1
    precision ``a * H^T H + I / recon_prior_var``.
    """
    kernel.require_lemma_compatible()
    x0 = np.asarray(x0, dtype=np.float64)
    L = schedule.steps
    disc = schedule.discretize()

    abar_L = float(disc.alpha_bar[L])
    prior = 0.0
    if abar_L > 0.0:
        prior = gaussian_kl_isotropic(math.sqrt(abar_L) * downsample_n(x0, kernel, L), 1.0 - abar_L)

    step_kl = {}
    for level in range(L, 1, -1):
        x_l = forward_marginal_sample(x0, level / L, schedule, kernel, rng)
        x0_hat = np.asarray(denoiser(x_l, level / L, class_id), dtype=np.float64)
        p_true = posterior_params(x_l, x0, level, schedule, kernel, coefficients=disc)
        p_model = posterior_params(x_l, x0_hat, level, schedule, kernel, coefficients=disc)
        step_kl[level] = kl_quadratic(p_model.mu, p_true.mu, p_true)

    x1 = forward_marginal_sample(x0, 1.0 / L, schedule, kernel, rng)
    x0_hat = np.asarray(denoiser(x1, 1.0 / L, class_id), dtype=np.float64)
    p1 = posterior_params(x1, x0_hat, 1, schedule, kernel, coefficients=disc)
    p_rec = PosteriorParams(mu=p1.mu, a=p1.a, b=1.0 / recon_prior_var, gram=p1.gram, level=1)
    d = x0 - p_rec.mu
    n = d.size
    recon = 0.5 * float(np.sum(d * sigma_inv_apply(p_rec, d))) + 0.5 * sigma_logdet(p_rec, x0.shape[0]) \
        + 0.5 * n * math.log(2.0 * math.pi)

    total = prior + sum(step_kl.values()) + recon
    return ElboReport(prior_kl=prior, step_kl=step_kl, reconstruction=recon, total=total)
