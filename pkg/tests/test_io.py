import io

import numpy as np
import pytest
from PIL import Image

from udpm.degrade import Kernel, make_box_kernel
from udpm.denoiser import Architecture, ConvDenoiser
from udpm.generation import sample
from udpm.io import (
    Checkpoint,
    checkpoint_files_digest,
    kernel_bytes,
    kernel_from_bytes,
    load_checkpoint,
    load_latent,
    png_bytes,
    quantize,
    read_manifest,
    save_checkpoint,
    save_latent,
    tile,
    write_manifest,
)
from udpm.schedule import Schedule
from udpm.tensor import RngStream


def test_quantize_rounding():
    x = np.array([[[-0.5, 0.0, 0.5 / 255, 1.5 / 255, 1.0, 2.0]]])
    # 0.5 and 1.5 round half to even: 0 and 2
    assert quantize(x)[0, :, 0].tolist() == [0, 0, 0, 2, 255, 255]


def test_png_roundtrip():
    x = np.random.default_rng(0).uniform(0, 1, (3, 5, 4))
    img = Image.open(io.BytesIO(png_bytes(x)))
    assert img.size == (4, 5)
    assert np.array_equal(np.asarray(img), quantize(x))
    with pytest.raises(ValueError):
        png_bytes(np.zeros((2, 4, 4)))


def test_tile_layout():
    ims = [np.full((1, 2, 2), v) for v in (0.1, 0.2, 0.3, 0.4)]
    t = tile(ims, 2, 2, pad=1)
    assert t.shape == (1, 5, 5)
    assert t[0, 0, 3] == 0.2 and t[0, 3, 0] == 0.3 and t[0, 2, 2] == 0.0


def test_kernel_bytes():
    k = Kernel([[0.6, 0.8]], 2)
    k2 = kernel_from_bytes(kernel_bytes(k))
    assert np.array_equal(k2.taps, k.taps) and k2.stride == 2


def test_checkpoint_roundtrip(tmp_path):
    k = make_box_kernel(2)
    arch = Architecture(1, (8, 8), width=4, num_classes=2)
    m = ConvDenoiser(arch, seed=1)
    ck = Checkpoint(arch, m.params, {n: v * 0.5 for n, v in m.params.items()}, 0.99, Schedule.for_kernel(k, 2), k, 7)
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.digest() == ck.digest()
    assert back.step == 7
    x = np.random.default_rng(0).standard_normal((1, 2, 2))
    assert np.array_equal(back.denoiser(use_ema=False).predict(x, 0.5), m.predict(x, 0.5))
    d1 = checkpoint_files_digest(tmp_path / "ck")
    save_checkpoint(ck, tmp_path / "ck2")
    assert checkpoint_files_digest(tmp_path / "ck2") == d1


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_latent_roundtrip(tmp_path, box2, sched3):
    _, rec = sample(lambda x, l, c=None: np.zeros((1, 16, 16)), sched3, box2, shape=(1, 16, 16), rng=RngStream(0, 0))
    save_latent(rec, tmp_path / "a.lat")
    back = load_latent(tmp_path / "a.lat")
    assert back.schedule == rec.schedule and back.seed == rec.seed
    for l in rec.noises:
        assert np.array_equal(back.noises[l], rec.noises[l])


def test_manifest(tmp_path):
    write_manifest(tmp_path, "sample", {"a": 1}, {"seed": 3}, "abc", ["x.png"])
    m = read_manifest(tmp_path)
    assert m["command"] == "sample" and m["checkpoint_hash"] == "abc" and m["tool_version"]
