"""On-disk formats: checkpoints, latent records, PNG output and run manifests.

Checkpoint directory::

    header.json          architecture, schedule, EMA decay, step, seeds, config
    kernel.bin           UDT1 taps followed by the stride as little-endian u32
    params/<name>.udt    live parameters
    ema/<name>.udt       EMA shadow parameters

Latent record directory (``*.lat``)::

    manifest.json        schedule, seed, meta, map file per level
    e<l>.udt             noise map with the shape of x_l
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import Kernel
from .denoiser import Architecture, ConvDenoiser
from .generation import LatentRecord
from .schedule import Schedule
from .tensor import load_udt, read_udt, save_udt, udt_bytes, write_udt

CHECKPOINT_FORMAT = "udpm-checkpoint/1"
LATENT_FORMAT = "udpm-latent/1"


def kernel_bytes(kernel: Kernel) -> bytes:
    return udt_bytes(kernel.taps) + struct.pack("<I", kernel.stride)


def kernel_from_bytes(payload: bytes) -> Kernel:
    buf = io.BytesIO(payload)
    taps = read_udt(buf)
    (stride,) = struct.unpack("<I", buf.read(4))
    return Kernel(taps, stride)


@dataclass
class Checkpoint:
    arch: Architecture
    params: dict
    ema_params: dict
    ema_decay: float
    schedule: Schedule
    kernel: Kernel
    step: int = 0
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def denoiser(self, use_ema: bool = True) -> ConvDenoiser:
        src = self.ema_params if use_ema else self.params
        return ConvDenoiser(self.arch, {k: v.copy() for k, v in src.items()})

    def header(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "architecture": self.arch.to_dict(),
            "architecture_digest": self.arch.digest(),
            "schedule": self.schedule.metadata(),
            "ema_decay": self.ema_decay,
            "step": self.step,
            "seeds": self.seeds,
            "config": self.config,
            "tensors": sorted(self.params),
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.header(), sort_keys=True).encode())
        h.update(kernel_bytes(self.kernel))
        for group in (self.params, self.ema_params):
            for name in sorted(group):
                h.update(name.encode())
                h.update(udt_bytes(group[name]))
        return h.hexdigest()

    @classmethod
    def from_training(cls, result, step: int | None = None) -> Checkpoint:
        cfg = result.config
        return cls(
            arch=result.model.arch,
            params={k: v.copy() for k, v in result.model.params.items()},
            ema_params={k: v.copy() for k, v in result.ema.shadow.items()},
            ema_decay=result.ema.decay,
            schedule=result.schedule,
            kernel=result.kernel,
            step=step if step is not None else len(result.history),
            seeds={"train": cfg.seed, "dataset": cfg.dataset.seed},
            config=cfg.to_dict(),
        )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "ema").mkdir(parents=True, exist_ok=True)
    with open(path / "header.json", "w") as fh:
        json.dump(ckpt.header(), fh, indent=2, sort_keys=True)
    (path / "kernel.bin").write_bytes(kernel_bytes(ckpt.kernel))
    for name, arr in ckpt.params.items():
        save_udt(path / "params" / f"{name}.udt", arr)
    for name, arr in ckpt.ema_params.items():
        save_udt(path / "ema" / f"{name}.udt", arr)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    header_file = path / "header.json"
    if not header_file.exists():
        raise FileNotFoundError(f"no checkpoint header at {header_file}")
    header = json.loads(header_file.read_text())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    arch_d = dict(header["architecture"])
    arch = Architecture(**arch_d)
    if arch.digest() != header.get("architecture_digest"):
        raise ValueError("architecture digest mismatch; checkpoint header is corrupt")
    names = header["tensors"]
    params = {n: load_udt(path / "params" / f"{n}.udt") for n in names}
    ema = {n: load_udt(path / "ema" / f"{n}.udt") for n in names}
    return Checkpoint(
        arch=arch,
        params=params,
        ema_params=ema,
        ema_decay=header["ema_decay"],
        schedule=Schedule.from_metadata(header["schedule"]),
        kernel=kernel_from_bytes((path / "kernel.bin").read_bytes()),
        step=header["step"],
        seeds=header.get("seeds", {}),
        config=header.get("config", {}),
    )


def checkpoint_files_digest(path) -> str:
    """sha256 over every file of a checkpoint directory, in sorted path order."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# latent records


def save_latent(record: LatentRecord, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    maps = {}
    for l, e in sorted(record.noises.items()):
        fname = f"e{l}.udt"
        save_udt(path / fname, e)
        maps[str(l)] = fname
    manifest = {
        "format": LATENT_FORMAT,
        "schedule": record.schedule,
        "seed": record.seed,
        "meta": record.meta,
        "maps": maps,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_latent(path) -> LatentRecord:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != LATENT_FORMAT:
        raise ValueError(f"unsupported latent format {manifest.get('format')!r}")
    noises = {int(l): load_udt(path / fname) for l, fname in manifest["maps"].items()}
    return LatentRecord(noises, manifest["schedule"], manifest.get("seed"), manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# images


def quantize(image) -> np.ndarray:
    """(C, H, W) reals -> (H, W, C) uint8: clamp to [0, 1], scale by 255, round half to even."""
    x = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def png_bytes(image) -> bytes:
    from PIL import Image

    q = quantize(image)
    c = q.shape[2]
    if c == 1:
        img = Image.fromarray(q[:, :, 0], mode="L")
    elif c == 3:
        img = Image.fromarray(q, mode="RGB")
    else:
        raise ValueError(f"PNG output supports 1 or 3 channels, got {c}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_png(image, path) -> Path:
    path = Path(path)
    path.write_bytes(png_bytes(image))
    return path


def tile(images, rows: int, cols: int, pad: int = 1) -> np.ndarray:
    """Row-major tiling of equally shaped (C, H, W) images with ``pad`` pixels of zeros."""
    images = [np.asarray(im) for im in images]
    if len(images) != rows * cols:
        raise ValueError(f"need {rows * cols} images, got {len(images)}")
    C, H, W = images[0].shape
    out = np.zeros((C, rows * H + (rows - 1) * pad, cols * W + (cols - 1) * pad))
    for k, im in enumerate(images):
        i, j = divmod(k, cols)
        out[:, i * (H + pad):i * (H + pad) + H, j * (W + pad):j * (W + pad) + W] = im
    return out


def save_sample(image, path_stem, sidecar: dict) -> dict:
    """Write ``<stem>.png``, ``<stem>.udt`` and ``<stem>.json``; returns the paths."""
    stem = Path(path_stem)
    data = np.asarray(getattr(image, "data", image))
    png = save_png(data, stem.with_suffix(".png"))
    raw = stem.with_suffix(".udt")
    save_udt(raw, data)
    side = stem.with_suffix(".json")
    with open(side, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return {"png": str(png), "udt": str(raw), "sidecar": str(side)}


# ---------------------------------------------------------------------------
# manifests


def write_manifest(out_dir, command: str, config: dict, seeds: dict, checkpoint_hash: str | None, artifacts) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "checkpoint_hash": checkpoint_hash,
        "artifacts": artifacts,
        "tool_version": __version__,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text())


__all__ = [
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_files_digest",
    "save_latent",
    "load_latent",
    "quantize",
    "png_bytes",
    "save_png",
    "tile",
    "save_sample",
    "write_manifest",
    "read_manifest",
    "write_udt",
]
