"""Brute-force ground truth for the structured operators.

Everything here works on explicit matrices over flattened single-channel
grids (row-major), built from the kernel taps directly rather than from the
implicit operators.  The implicit operators are only touched through probe
vectors when a dense matrix is checked before use, so a bug in one route
cannot hide in the other.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

MAX_ORACLE_SIDE = 32


class SingularCovariance(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class DenseOperator:
    matrix: np.ndarray
    label: str
    in_grid: tuple[int, int] | None = None
    out_grid: tuple[int, int] | None = None

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, v):
        return self.matrix @ v

    def check_against(self, implicit, probes: int = 20, tol: float = 1e-10, seed: int = 0) -> float:
        """Max relative mismatch against ``implicit`` (grid -> grid) over random probes."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal(self.in_grid)
            want = self.matrix @ x.ravel()
            got = np.asarray(implicit(x)).ravel()
            worst = max(worst, np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300))
        if worst > tol:
            raise AssertionError(f"{self.label}: implicit operator disagrees with dense matrix ({worst:.3e})")
        return worst


def _guard(grid) -> None:
    if max(grid) > MAX_ORACLE_SIDE:
        raise ValueError(f"oracle grids are capped at {MAX_ORACLE_SIDE}x{MAX_ORACLE_SIDE}, got {grid}")


def dense_blur(taps: np.ndarray, grid) -> np.ndarray:
    """Circulant W with (W x)[i] = sum_{p,q} taps[p,q] x[i + (p,q)] (indices mod grid)."""
    H, W = grid
    N = H * W
    M = np.zeros((N, N))
    for i1 in range(H):
        for i2 in range(W):
            row = i1 * W + i2
            for (p, q), w in np.ndenumerate(taps):
                M[row, ((i1 + p) % H) * W + (i2 + q) % W] += w
    return M


def dense_subsample(grid, stride: int) -> np.ndarray:
    H, W = grid
    h, w = H // stride, W // stride
    S = np.zeros((h * w, H * W))
    for j1 in range(h):
        for j2 in range(w):
            S[j1 * w + j2, (stride * j1) * W + stride * j2] = 1.0
    return S


def dense_h(kernel, grid, verify: bool = True) -> DenseOperator:
    """Explicit S W for ``kernel`` on ``grid``; checked against the implicit operator on 20 probes."""
    grid = (int(grid[0]), int(grid[1]))
    _guard(grid)
    s = kernel.stride
    if grid[0] % s or grid[1] % s:
        raise ValueError(f"grid {grid} not divisible by stride {s}")
    mat = dense_subsample(grid, s) @ dense_blur(kernel.taps, grid)
    op = DenseOperator(mat, f"H[{grid[0]}x{grid[1]}, stride {s}]", grid, (grid[0] // s, grid[1] // s))
    if verify:
        from .degrade import downsample

        op.check_against(lambda x: downsample(x, kernel))
    return op


def dense_h_power(kernel, grid, n: int) -> np.ndarray:
    """Matrix of H applied ``n`` times starting on ``grid`` (identity for ``n == 0``)."""
    H, W = grid
    mat = np.eye(H * W)
    g = (H, W)
    for _ in range(n):
        mat = dense_h(kernel, g, verify=False).matrix @ mat
        g = (g[0] // kernel.stride, g[1] // kernel.stride)
    return mat


def dense_gram(hd: DenseOperator) -> np.ndarray:
    return hd.matrix.T @ hd.matrix


def dense_sigma(a: float, b: float, hd: DenseOperator):
    """(a H^T H + b I)^{-1} by direct inversion, and its symmetric square root."""
    n = hd.matrix.shape[1]
    prec = a * dense_gram(hd) + b * np.eye(n)
    sigma = np.linalg.inv(prec)
    sigma = 0.5 * (sigma + sigma.T)
    evals, evecs = np.linalg.eigh(sigma)
    if np.any(evals <= 0):
        raise SingularCovariance("Sigma is not positive definite")
    root = (evecs * np.sqrt(evals)) @ evecs.T
    return DenseOperator(sigma, "Sigma", hd.in_grid, hd.in_grid), DenseOperator(root, "Sigma^1/2", hd.in_grid, hd.in_grid)


def dense_posterior(x_l, x0, level: int, schedule, kernel):
    """Condition the explicit joint of (x_{level-1}, x_level) given x0 on x_level.

    Joint model: ``x_{l-1} ~ N(sqrt(ab_{l-1}) H^{l-1} x0, (1 - ab_{l-1}) I)``
    and ``x_l = sqrt(alpha_l) H x_{l-1} + sqrt(beta_l) e``.  Returns the
    conditional mean (on the x_{l-1} grid) and covariance matrix.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x_l = np.asarray(x_l, dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError("dense_posterior works on single-channel 2D grids")
    _guard(x0.shape)
    disc = schedule.discretize()
    alpha, beta, _, abar_prev = disc.coefficients(level)
    s = kernel.stride
    fine = (x0.shape[0] // s ** (level - 1), x0.shape[1] // s ** (level - 1))
    hp = dense_h_power(kernel, x0.shape, level - 1)
    hd = dense_h(kernel, fine, verify=False).matrix
    n = fine[0] * fine[1]

    m1 = math.sqrt(abar_prev) * (hp @ x0.ravel())
    c11 = (1.0 - abar_prev) * np.eye(n)
    m2 = math.sqrt(alpha) * (hd @ m1)
    c21 = math.sqrt(alpha) * (hd @ c11)
    c22 = alpha * (hd @ c11 @ hd.T) + beta * np.eye(hd.shape[0])
    try:
        chol = np.linalg.cholesky(c22)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("observation covariance is singular") from exc
    # K = C12 C22^{-1} via two triangular solves
    k = np.linalg.solve(chol.T, np.linalg.solve(chol, c21)).T
    mean = m1 + k @ (x_l.ravel() - m2)
    cov = c11 - k @ c21
    return mean.reshape(fine), 0.5 * (cov + cov.T)


def ddpm_reference(predict, alpha_bar, x_T, noises):
    """Scalar-variance DDPM ancestral sampler in natural-parameter form.

    ``alpha_bar`` lists ``abar_0 = 1, abar_1, ..., abar_T``; ``noises[t]`` is
    the draw used to produce ``x_t`` for ``t = 1..T-1``; ``predict(x, t/T)``
    returns an ``x0`` estimate.  Returns the trajectory ``[x_T, ..., x_0]``.
    """
    T = len(alpha_bar) - 1
    x = np.array(x_T, copy=True)
    traj = [x]
    for t in range(T, 0, -1):
        x0_hat = np.asarray(predict(x, t / T))
        if t == 1:
            x = np.array(x0_hat, copy=True)
        else:
            alpha = alpha_bar[t] / alpha_bar[t - 1]
            beta = 1.0 - alpha
            prior_prec = 1.0 / (1.0 - alpha_bar[t - 1])
            var = 1.0 / (alpha / beta + prior_prec)
            mean = var * ((math.sqrt(alpha) / beta) * x + (math.sqrt(alpha_bar[t - 1]) * prior_prec) * x0_hat)
            x = mean + math.sqrt(var) * noises[t - 1]
        traj.append(x)
    return traj


def finite_difference_check(model, x, level, class_id, probes: int = 200, h: float = 1e-5, seed: int = 0):
    """Compare analytic parameter gradients with central differences.

    The scalar objective is ``sum(R * model(x))`` for a fixed random ``R``.
    Returns ``(max relative error, list of (name, index, analytic, numeric))``.
    """
    rng = np.random.default_rng(seed)
    out, cache = model.forward(x, level, class_id)
    R = rng.standard_normal(out.shape)
    grads = model.backward(cache, R)

    def objective():
        return float(np.sum(model.forward(x, level, class_id)[0] * R))

    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names], dtype=float)
    # every array gets at least two probes, the rest proportional to size
    picks = [n for n in names for _ in range(2)]
    picks += list(rng.choice(names, size=probes - len(picks), p=sizes / sizes.sum()))
    rows = []
    worst = 0.0
    for name in picks:
        p = model.params[name]
        idx = tuple(int(rng.integers(0, d)) for d in p.shape)
        old = p[idx]
        p[idx] = old + h
        fp = objective()
        p[idx] = old - h
        fm = objective()
        p[idx] = old
        num = (fp - fm) / (2 * h)
        ana = float(grads[name][idx])
        scale = max(abs(ana), abs(num))
        err = 0.0 if scale == 0.0 else abs(ana - num) / max(scale, 1e-6)
        worst = max(worst, err)
        rows.append((name, idx, ana, num))
    return worst, rows


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class VerifyConfig:
    seed: int = 0
    mc_draws: int = 100_000
    kernel_scale: float = 1.0
    filter: str | None = None


@dataclass
class CheckResult:
    name: str
    anchor: str
    error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "anchor": self.anchor,
            "measured_error": self.error,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "seconds": round(self.seconds, 4),
            "detail": self.detail,
        }


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"pass": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _mc_covariance(draw, draws: int, chunk: int = 10_000):
    """Empirical covariance of flattened vectors produced by ``draw(n) -> (n, d)``."""
    total, outer, count = None, None, 0
    while count < draws:
        n = min(chunk, draws - count)
        v = draw(n)
        s = v.sum(axis=0)
        o = v.T @ v
        total = s if total is None else total + s
        outer = o if outer is None else outer + o
        count += n
    mean = total / count
    return (outer - count * np.outer(mean, mean)) / (count - 1), mean


def _checks(cfg: VerifyConfig):
    """Yield ``(name, anchor, fn)`` with ``fn() -> (error, tolerance, detail)``."""
    from . import degrade, diffusion
    from .denoiser import Architecture, ConvDenoiser, OracleDenoiser
    from .schedule import VARIANTS, Schedule
    from .tensor import RngStream

    def kernel_for(stride):
        return degrade.make_box_kernel(stride).scaled(cfg.kernel_scale)

    lemma_grids = {2: (16, 16), 3: (12, 12), 4: (16, 16)}

    for g in (2, 3, 4):
        def lemma_dense(g=g):
            k = kernel_for(g)
            hd = dense_h(k, lemma_grids[g])
            err = float(np.max(np.abs(hd.matrix @ hd.matrix.T - np.eye(hd.shape[0]))))
            return err, 1e-12, f"||w||^2 = {k.norm_sq:.6f}"

        def lemma_mc(g=g):
            k = kernel_for(g)
            rng = RngStream(cfg.seed, 100 + g)
            grid = lemma_grids[g]

            def draw(n):
                e = rng.normal((n,) + grid)
                return degrade.downsample(e, k).reshape(n, -1)

            cov, _ = _mc_covariance(draw, cfg.mc_draws)
            err = float(np.max(np.abs(cov - np.eye(cov.shape[0]))))
            return err, 0.02, f"{cfg.mc_draws} draws"

        yield f"lemma1.dense.stride{g}", "white noise stays white under non-overlapping blur+subsample", lemma_dense
        yield f"lemma1.montecarlo.stride{g}", "white noise stays white under non-overlapping blur+subsample", lemma_mc

    def adjointness():
        rng = np.random.default_rng(cfg.seed)
        k = kernel_for(2)
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal((8, 8))
            y = rng.standard_normal((4, 4))
            lhs = np.sum(degrade.downsample(x, k) * y)
            rhs = np.sum(x * degrade.adjoint(y, k))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        return worst, 1e-10, "100 random pairs"

    yield "degrade.adjoint", "transpose is zero-fill then flipped kernel", adjointness

    def dense_probe():
        k = kernel_for(2)
        hd = dense_h(k, (8, 8), verify=False)
        err = hd.check_against(lambda x: degrade.downsample(x, k), tol=np.inf)
        return err, 1e-10, "20 probes"

    yield "degrade.dense_matches_implicit", "matrix form of blur+subsample", dense_probe

    def projector():
        k = kernel_for(2)
        p = dense_gram(dense_h(k, (8, 8)))
        c = k.norm_sq
        err = float(np.linalg.norm(p @ p - c * p))
        return err, 1e-10, "||P^2 - ||w||^2 P||_F"

    yield "gram.projector", "Gram operator of non-overlapping blur+subsample", projector

    def literal_gap():
        k = kernel_for(2)
        x = np.random.default_rng(cfg.seed).standard_normal((8, 8))
        lit = degrade.gram_apply(x, degrade.GramDescriptor(k, (8, 8), degrade.DFT_LITERAL))
        proj = degrade.gram_apply(x, degrade.GramDescriptor(k, (8, 8), degrade.PROJECTOR))
        identity_err = float(np.max(np.abs(lit - k.norm_sq * x)))
        gap = float(np.linalg.norm(lit - proj) / np.linalg.norm(proj))
        return identity_err, 1e-12, f"literal filter acts as ||w||^2 I; relative gap to exact Gram = {gap:.4f}"

    yield "gram.literal_filter", "poly-phase Gram filter via DFT", literal_gap

    def posterior(seed):
        k = degrade.make_box_kernel(2)
        sched = Schedule.for_kernel(k, 3)
        rng = np.random.default_rng(seed)
        worst_mu = worst_cov = 0.0
        for level in (1, 2, 3):
            x0 = rng.standard_normal((8, 8))
            xl = rng.standard_normal((8 // 2**level, 8 // 2**level))
            mean_d, cov_d = dense_posterior(xl, x0, level, sched, k)
            p = diffusion.posterior_params(xl, x0, level, sched, k)
            worst_mu = max(worst_mu, np.linalg.norm(p.mu - mean_d) / np.linalg.norm(mean_d))
            if level > 1:
                basis = np.eye(cov_d.shape[0]).reshape((-1,) + mean_d.shape)
                cov_i = np.stack([diffusion.sigma_apply(p, e).ravel() for e in basis], axis=1)
                worst_cov = max(worst_cov, np.linalg.norm(cov_i - cov_d) / np.linalg.norm(cov_d))
            else:
                worst_cov = max(worst_cov, float(np.max(np.abs(cov_d))))
        return max(worst_mu, worst_cov), 1e-8, f"mean {worst_mu:.2e}, covariance {worst_cov:.2e}"

    for seed in range(5):
        yield f"posterior.conditioning.seed{seed}", "Gaussian posterior of the reverse step", lambda seed=seed: posterior(cfg.seed + seed)

    def sigma_params(grid=(8, 8)):
        k = degrade.make_box_kernel(2)
        sched = Schedule.for_kernel(k, 3)
        return diffusion.covariance_params(2, sched, k, grid), k

    def sigma_dense():
        p, k = sigma_params()
        sig, root = dense_sigma(p.a, p.b, dense_h(k, (8, 8)))
        v = np.random.default_rng(cfg.seed).standard_normal((8, 8))
        e1 = np.linalg.norm(diffusion.sigma_apply(p, v).ravel() - sig @ v.ravel()) / np.linalg.norm(sig @ v.ravel())
        twice = diffusion.sigma_sqrt_apply(p, diffusion.sigma_sqrt_apply(p, v))
        e2 = np.linalg.norm(twice - diffusion.sigma_apply(p, v)) / np.linalg.norm(diffusion.sigma_apply(p, v))
        evals = np.linalg.eigvalsh(sig.matrix)
        lo, hi = p.eigenvalues()
        n, r = 64, 16
        want = np.sort(np.r_[np.full(n - r, lo), np.full(r, hi)])
        e3 = float(np.max(np.abs(np.sort(evals) - want)) / lo)
        return max(e1, e2, e3), 1e-8, f"apply {e1:.1e}, sqrt^2 {e2:.1e}, spectrum {e3:.1e}"

    yield "sigma.dense", "structured posterior covariance and its square root", sigma_dense

    def sigma_mc():
        p, k = sigma_params((4, 4))
        sig, _ = dense_sigma(p.a, p.b, dense_h(k, (4, 4)))
        rng = RngStream(cfg.seed, 200)

        def draw(n):
            e = rng.normal((n, 4, 4))
            return diffusion.sigma_sqrt_apply(p, e).reshape(n, -1)

        cov, _ = _mc_covariance(draw, cfg.mc_draws)
        return float(np.max(np.abs(cov - sig.matrix))), 0.02, f"{cfg.mc_draws} draws"

    yield "sigma.montecarlo", "posterior sampling with the covariance square root", sigma_mc

    def forward_consistency():
        k = degrade.make_box_kernel(2)
        sched = Schedule.for_kernel(k, 3)
        disc = sched.discretize()
        x0 = np.random.default_rng(cfg.seed).uniform(0, 1, (8, 8))
        level = 2
        rng = RngStream(cfg.seed, 300)
        chain_mean = x0
        for j in range(1, level + 1):
            chain_mean = math.sqrt(disc.alpha[j - 1]) * degrade.downsample(chain_mean, k)
        direct_mean = math.sqrt(disc.alpha_bar[level]) * degrade.downsample_n(x0, k, level)
        mean_err = float(np.max(np.abs(chain_mean - direct_mean)))
        n = cfg.mc_draws
        xs = np.broadcast_to(x0, (n, 8, 8))
        for j in range(1, level + 1):
            xs = diffusion.forward_step_sample(xs, k, float(disc.beta[j - 1]), rng)
        direct = diffusion.forward_marginal_sample(np.broadcast_to(x0, (n, 8, 8)), level / 3, sched, k, rng)
        var_err = float(np.max(np.abs(xs.var(axis=0, ddof=1) - direct.var(axis=0, ddof=1))))
        emp_mean_err = float(np.max(np.abs(xs.mean(axis=0) - direct.mean(axis=0))))
        if mean_err > 1e-12:
            return mean_err, 0.02, f"analytic means disagree by {mean_err:.1e}"
        return var_err, 0.02, f"analytic mean gap {mean_err:.1e}, empirical mean gap {emp_mean_err:.3f}"

    yield "forward.marginal_vs_chain", "closed-form marginal of the degrading forward chain", forward_consistency

    def ddpm():
        k = degrade.Kernel([[1.0]], 1)
        sched = Schedule(steps=4, stride=1, tap_sum=1.0)
        rng = RngStream(cfg.seed, 400)
        target = rng.normal((1, 8, 8))
        from .generation import sample

        model = lambda x, l, c=None: 0.5 * x + l * target  # noqa: E731
        trace = []
        _, rec = sample(model, sched, k, shape=(1, 8, 8), rng=rng, trace=trace)
        ref = ddpm_reference(lambda x, l: model(x, l), list(sched.discretize().alpha_bar), rec.noises[4], rec.noises)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(trace, ref))
        return err, 0.0, "bit-exact trajectory"

    yield "ddpm.reduction", "identity degradation recovers scalar DDPM", ddpm

    def schedule_check():
        worst = 0.0
        grid = np.linspace(0.0, 1.0, 1001)
        for variant in VARIANTS:
            s = Schedule(steps=3, stride=2, tap_sum=2.0, variant=variant)
            vals = np.array([s.alpha_bar(l) for l in grid])
            worst = max(worst, abs(vals[0] - 1.0), abs(vals[-1]))
            if not np.all(np.diff(vals) < 0):
                worst = max(worst, 1.0)
        return worst, 0.0, "endpoints exact, strictly decreasing on 1001 points"

    yield "schedule.variants", "noise scheduler and its ablation variants", schedule_check

    def snr():
        k = degrade.make_box_kernel(2)
        s = Schedule.for_kernel(k, 3)
        x0 = np.full((16, 16), 0.7)
        worst = 0.0
        for n in range(0, 4):
            l = n / 3
            signal = math.sqrt(s.alpha_bar(l)) * degrade.downsample_n(x0, k, n)
            worst = max(worst, float(np.max(np.abs(signal - 0.7 * math.sqrt(s.numerator(l))))))
        return worst, 1e-12, "signal level independent of the kernel tap sum"

    yield "schedule.snr_normalization", "scheduler denominator cancels the kernel DC gain", snr

    def logdet():
        k = degrade.make_box_kernel(2)
        p = diffusion.covariance_params(2, Schedule.for_kernel(k, 2), k, (4, 4))
        sig, _ = dense_sigma(p.a, p.b, dense_h(k, (4, 4)))
        _, dense_ld = np.linalg.slogdet(sig.matrix)
        ld = diffusion.sigma_logdet(p)
        return abs(ld - dense_ld) / abs(dense_ld), 1e-8, f"{ld:.10f} vs {dense_ld:.10f}"

    yield "elbo.logdet", "log-determinant of the posterior covariance", logdet

    def elbo_oracle():
        k = degrade.make_box_kernel(2)
        s = Schedule.for_kernel(k, 3)
        x0 = np.random.default_rng(cfg.seed).uniform(0, 1, (1, 8, 8))
        rep = diffusion.elbo_report(x0, OracleDenoiser(x0), s, k, RngStream(cfg.seed, 500))
        err = abs(rep.prior_kl) + sum(abs(v) for v in rep.step_kl.values())
        return err, 0.0, "prior and per-step KL terms vanish for a perfect denoiser"

    yield "elbo.oracle", "variational bound decomposition", elbo_oracle

    def kl_dense():
        k = degrade.make_box_kernel(2)
        p = diffusion.covariance_params(2, Schedule.for_kernel(k, 3), k, (8, 8))
        sig, _ = dense_sigma(p.a, p.b, dense_h(k, (8, 8)))
        d = np.random.default_rng(cfg.seed).standard_normal((8, 8))
        want = 0.5 * d.ravel() @ np.linalg.solve(sig.matrix, d.ravel())
        got = diffusion.kl_quadratic(d, np.zeros_like(d), p)
        return abs(got - want) / abs(want), 1e-10, "quadratic KL term"

    yield "elbo.kl_quadratic", "per-step KL between Gaussians with shared covariance", kl_dense

    def gradients():
        arch = Architecture(channels=1, resolution=(8, 8), width=8, num_classes=2)
        model = ConvDenoiser(arch, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        for name in model.params:
            model.params[name] = model.params[name] + 0.2 * rng.standard_normal(model.params[name].shape)
        x = rng.standard_normal((2, 1, 4, 4))
        err, _ = finite_difference_check(model, x, np.array([0.4, 0.8]), np.array([1, -1]), seed=cfg.seed)
        return err, 1e-5, "200 coordinates, central differences h=1e-5"

    yield "gradient.finite_difference", "denoiser training gradients", gradients


def available_checks() -> list[str]:
    return [name for name, _, _ in _checks(VerifyConfig(mc_draws=0))]


def run_verification_suite(config: VerifyConfig | None = None) -> VerificationReport:
    """Run every oracle check (optionally those whose name contains ``config.filter``)."""
    cfg = config or VerifyConfig()
    checks = list(_checks(cfg))
    if cfg.filter:
        checks = [c for c in checks if cfg.filter in c[0]]
        if not checks:
            raise KeyError(f"no verification check matches filter {cfg.filter!r}")
    report = VerificationReport()
    for name, anchor, fn in checks:
        t0 = time.perf_counter()
        try:
            err, tol, detail = fn()
            passed = bool(err <= tol)
        except Exception as exc:  # a crashing check is a failed check
            err, tol, detail, passed = float("inf"), 0.0, f"{type(exc).__name__}: {exc}", False
        report.checks.append(CheckResult(name, anchor, float(err), float(tol), passed, time.perf_counter() - t0, detail))
    return report
