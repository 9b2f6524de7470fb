"""Acceptance criteria, one test each.

Each test records a ``PASS``/``FAIL`` line; the lines are printed together at
the end of the pytest run (see ``conftest.py``) and when this file is run as a
script.
"""

import math
import time

import numpy as np

from udpm.degrade import make_box_kernel
from udpm.denoiser import Architecture, ConvDenoiser, OracleDenoiser
from udpm.diffusion import elbo_report
from udpm.generation import GuidanceConfig, cfg_predict, sample
from udpm.latent import InterpolationGrid, perturb
from udpm.oracle import VerifyConfig, run_verification_suite
from udpm.schedule import Schedule, steps_for_size
from udpm.tensor import RngStream
from udpm.training import TrainConfig, ToyDataset, train

RESULTS = {}


def _record(number, title, ok, detail, seconds, budget):
    ok = bool(ok) and seconds < budget
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail} ({seconds:.1f}s, budget {budget:g}s)"
    RESULTS[number] = line
    print(line)
    assert ok, line


def _suite(filter_):
    t0 = time.perf_counter()
    report = run_verification_suite(VerifyConfig(filter=filter_))
    dt = time.perf_counter() - t0
    worst = ", ".join(f"{c.name}={c.error:.2e}/{c.tolerance:g}" for c in report.checks)
    return report.passed, worst, dt


def test_01_step_count():
    t0 = time.perf_counter()
    k = make_box_kernel(2)
    counts = {}
    for size in (64, 128, 256):
        calls = []
        s = Schedule.for_kernel(k, steps_for_size(size, size, 2))
        stub = lambda x, l, c=None, calls=calls, size=size: calls.append(l) or np.zeros((1, size, size))  # noqa: E731
        sample(stub, s, k, shape=(1, size, size), rng=RngStream(0, 0))
        counts[size] = len(calls)
    dt = time.perf_counter() - t0
    _record(1, "denoiser evaluations per sample", counts == {64: 5, 128: 6, 256: 7}, f"{counts}", dt, 1.0)


def test_02_lemma1():
    ok, detail, dt = _suite("lemma1")
    _record(2, "white noise preserved by box blur+subsample", ok, detail, dt, 30)


def test_03_posterior():
    ok, detail, dt = _suite("posterior.conditioning")
    _record(3, "posterior vs dense Gaussian conditioning", ok, detail, dt, 30)


def test_04_sigma_sqrt():
    ok, detail, dt = _suite("sigma.")
    _record(4, "covariance square root", ok, detail, dt, 60)


def test_05_forward_consistency():
    ok, detail, dt = _suite("forward.marginal_vs_chain")
    _record(5, "chained forward steps vs direct marginal", ok, detail, dt, 60)


def test_06_ddpm_reduction():
    ok, detail, dt = _suite("ddpm.reduction")
    _record(6, "identity kernel reproduces scalar DDPM", ok, detail, dt, 5)


def test_07_gradient_check():
    ok, detail, dt = _suite("gradient.finite_difference")
    _record(7, "analytic vs finite-difference gradients", ok, detail, dt, 60)


def test_08_toy_end_to_end():
    t0 = time.perf_counter()
    cfg = TrainConfig.from_dict({
        "dataset": {"generator": "blobs", "size": 16, "count": 1, "seed": 0},
        "steps": 2000, "batch_size": 4, "lr": 1e-3, "diffusion_steps": 3, "seed": 0,
    })
    result = train(cfg)
    losses = result.losses()
    first, last = losses[:100].mean(), losses[-100:].mean()
    x0 = ToyDataset(**cfg.to_dict()["dataset"]).image(0)
    img, _ = sample(OracleDenoiser(x0), result.schedule, result.kernel, shape=x0.shape, rng=RngStream(0, 0), zero_noise=True)
    exact = np.array_equal(img.data, x0)
    dt = time.perf_counter() - t0
    detail = f"loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f} <= 0.5), oracle zero-noise exact={exact}"
    _record(8, "toy training and oracle reconstruction", last <= 0.5 * first and exact, detail, dt, 600)


def test_09_elbo():
    t0 = time.perf_counter()
    k = make_box_kernel(2)
    s = Schedule.for_kernel(k, 3)
    x0 = np.random.default_rng(0).uniform(0, 1, (1, 16, 16))
    rep = elbo_report(x0, OracleDenoiser(x0), s, k, RngStream(0, 0))
    zero = rep.prior_kl == 0.0 and all(v == 0.0 for v in rep.step_kl.values()) and s.alpha_bar(1.0) == 0.0
    ok, detail, _ = _suite("elbo.logdet")
    dt = time.perf_counter() - t0
    _record(9, "bound terms with a perfect denoiser", zero and ok, f"KL terms zero={zero}; {detail}", dt, 10)


def test_10_latent_tools():
    t0 = time.perf_counter()
    k = make_box_kernel(2)
    s = Schedule.for_kernel(k, 3)
    arch = Architecture(1, (16, 16), width=8, num_classes=2)
    m = ConvDenoiser(arch, seed=0)
    g = np.random.default_rng(0)
    for name in m.params:
        m.params[name] = m.params[name] + 0.1 * g.standard_normal(m.params[name].shape)
    runs = [sample(m, s, k, rng=RngStream(5, i), class_id=1) for i in range(4)]
    grid = dict(InterpolationGrid(tuple(r[1] for r in runs), 4, 4).cells())
    corners = all(
        np.array_equal(sample(m, s, k, record=grid[c], class_id=1)[0].data, runs[i][0].data)
        for c, i in {(0, 0): 0, (0, 3): 1, (3, 0): 2, (3, 3): 3}.items()
    )
    same = np.array_equal(sample(m, s, k, record=perturb(runs[0][1], 2, 0.0, RngStream(1, 0)), class_id=1)[0].data,
                          runs[0][0].data)
    x = g.standard_normal((1, 4, 4))
    f_u, f_c = m.predict(x, 0.6, None), m.predict(x, 0.6, 1)
    cfg_ok = np.array_equal(cfg_predict(m, x, 0.6, GuidanceConfig(0.0, 1)), f_u) and np.array_equal(
        cfg_predict(m, x, 0.6, GuidanceConfig(1.0, 1)), f_c)
    dt = time.perf_counter() - t0
    detail = f"corners exact={corners}, eps=0 exact={same}, guidance g in (0,1) exact={cfg_ok}"
    _record(10, "interpolation, perturbation and guidance identities", corners and same and cfg_ok, detail, dt, 30)


def test_11_scheduler():
    t0 = time.perf_counter()
    ok, detail, _ = _suite("schedule.")
    k = make_box_kernel(2)
    s = Schedule.for_kernel(k, 3)
    mid = abs(s.alpha_bar(0.5) - (1 - math.sin(math.pi / 4)) / 16) < 1e-15
    dt = time.perf_counter() - t0
    _record(11, "schedule endpoints and monotonicity", ok and mid, f"{detail}; l=0.5 value exact={mid}", dt, 5)


if __name__ == "__main__":
    import sys

    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
