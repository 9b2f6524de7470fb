import numpy as np
import pytest

from conftest import CountingDenoiser
from udpm.degrade import make_box_kernel
from udpm.denoiser import Architecture, ConvDenoiser, OracleDenoiser
from udpm.generation import GuidanceConfig, cfg_predict, sample, sample_many
from udpm.schedule import Schedule, steps_for_size
from udpm.tensor import RngStream


def _trained_like(num_classes=2, seed=0):
    m = ConvDenoiser(Architecture(1, (8, 8), width=8, num_classes=num_classes), seed=seed)
    rng = np.random.default_rng(seed)
    for k in m.params:
        m.params[k] = m.params[k] + 0.1 * rng.standard_normal(m.params[k].shape)
    return m


@pytest.mark.parametrize("size,L", [(64, 5), (128, 6), (256, 7)])
def test_one_evaluation_per_level(size, L):
    k = make_box_kernel(2)
    s = Schedule.for_kernel(k, steps_for_size(size, size, 2))
    stub = CountingDenoiser((1, size, size))
    sample(stub, s, k, shape=(1, size, size), rng=RngStream(0, 0))
    assert stub.calls == L


def test_record_shapes(box2, sched3):
    _, rec = sample(CountingDenoiser((1, 16, 16)), sched3, box2, shape=(1, 16, 16), rng=RngStream(0, 0))
    assert rec.shapes() == {1: (1, 8, 8), 2: (1, 4, 4), 3: (1, 2, 2)}


def test_replay_is_bit_identical(box2):
    s = Schedule.for_kernel(box2, 2)
    m = _trained_like()
    img, rec = sample(m, s, box2, rng=RngStream(5, 0), class_id=1)
    again, _ = sample(m, s, box2, record=rec, class_id=1)
    assert np.array_equal(img.data, again.data)


def test_oracle_zero_noise_reconstructs(box2):
    s = Schedule.for_kernel(box2, 2)
    x0 = np.random.default_rng(0).uniform(0, 1, (1, 8, 8))
    img, _ = sample(OracleDenoiser(x0), s, box2, shape=(1, 8, 8), rng=RngStream(0, 0), zero_noise=True)
    assert np.array_equal(img.data, x0)


def test_oracle_sample_mean(box2):
    s = Schedule.for_kernel(box2, 2)
    x0 = np.random.default_rng(1).uniform(0, 1, (1, 8, 8))
    outs = [sample(OracleDenoiser(x0), s, box2, shape=(1, 8, 8), rng=RngStream(2, i))[0].data for i in range(200)]
    assert np.max(np.abs(np.mean(outs, axis=0) - x0)) < 0.05


def test_cfg_endpoints_and_mixing():
    m = _trained_like()
    x = np.random.default_rng(3).standard_normal((1, 2, 2))
    f_u = m.predict(x, 0.7, None)
    f_c = m.predict(x, 0.7, 1)
    assert np.array_equal(cfg_predict(m, x, 0.7, GuidanceConfig(0.0, 1)), f_u)
    assert np.array_equal(cfg_predict(m, x, 0.7, GuidanceConfig(1.0, 1)), f_c)
    assert np.allclose(cfg_predict(m, x, 0.7, GuidanceConfig(3.0, 1)), f_u + 3 * (f_c - f_u), rtol=1e-12, atol=1e-12)


def test_cfg_rejects_unconditional():
    m = ConvDenoiser(Architecture(1, (8, 8), width=4))
    with pytest.raises(ValueError):
        cfg_predict(m, np.zeros((1, 2, 2)), 0.5, GuidanceConfig(2.0, 0))
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0, 0)


def test_record_mismatch_rejected(box2):
    s2 = Schedule.for_kernel(box2, 2)
    s3 = Schedule.for_kernel(box2, 3)
    stub = CountingDenoiser((1, 16, 16))
    _, rec = sample(stub, s2, box2, shape=(1, 16, 16), rng=RngStream(0, 0))
    with pytest.raises(ValueError):
        sample(stub, s3, box2, shape=(1, 16, 16), record=rec)


def test_sample_many_independent_of_threads(box2):
    s = Schedule.for_kernel(box2, 2)
    m = _trained_like(num_classes=0)
    one = sample_many(m, s, box2, seed=7, count=4, threads=1)
    many = sample_many(m, s, box2, seed=7, count=4, threads=4)
    for (a, _), (b, _) in zip(one, many):
        assert np.array_equal(a.data, b.data)
    assert not np.array_equal(one[0][0].data, one[1][0].data)
