"""Command-line entry point: ``udpm {verify,train,sample,interpolate,perturb,elbo}``.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
Exit status is 0 on success, 1 when a check fails and 2 on usage or config
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as uio
from .generation import GuidanceConfig, sample, sample_many
from .latent import InterpolationGrid, perturb
from .oracle import VerifyConfig, run_verification_suite
from .tensor import RngStream
from .training import ConfigError, TrainConfig, TrainingDiverged, train

log = logging.getLogger("udpm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key=value`` strings (dotted keys reach into ``dataset``) to a config dict."""
    out = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        target = out
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = _parse_value(value)
    return out


def _load_checkpoint(path):
    try:
        return uio.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _guidance(args):
    if args.guidance is None:
        return None
    if args.class_id is None:
        raise UsageError("--guidance needs --class")
    return GuidanceConfig(args.guidance, args.class_id)


def _sidecar(record, ckpt_hash, extra=None):
    d = {"seed": record.seed, "schedule": record.schedule, "meta": record.meta, "checkpoint_hash": ckpt_hash}
    d.update(extra or {})
    return d


def _replay_kwargs(record):
    """Guidance/class settings stored in a latent's metadata, so replays match the original."""
    g = record.meta.get("guidance")
    if g is not None:
        return {"guidance": GuidanceConfig(g["scale"], g["class_id"])}
    if record.meta.get("class_id") is not None:
        return {"class_id": record.meta["class_id"]}
    return {}


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    cfg = VerifyConfig(seed=args.seed, mc_draws=args.mc_draws, kernel_scale=args.kernel_scale, filter=args.filter)
    try:
        report = run_verification_suite(cfg)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    for c in report.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name:40s} error={c.error:.3e} tol={c.tolerance:.1e}  {c.detail}")
    doc = report.to_dict()
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2))
    if args.out:
        uio.write_manifest(args.out, "verify", vars(cfg), {"seed": args.seed}, None, [args.report] if args.report else [])
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    overrides = list(args.set or [])
    for flag in ("steps", "seed", "lr", "batch_size"):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{flag}={json.dumps(v)}")
    config = TrainConfig.from_dict(apply_overrides(raw, overrides))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(result, step):
        uio.save_checkpoint(uio.Checkpoint.from_training(result, step), out / f"checkpoint-{step:07d}")

    try:
        result = train(config, out_dir=out, on_checkpoint=on_checkpoint)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ckpt_dir = uio.save_checkpoint(uio.Checkpoint.from_training(result), out / "checkpoint")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "l", "ema"])
        for h in result.history:
            w.writerow([h["step"], repr(h["loss"]), repr(h["l"]), int(h["ema"])])
    digest = uio.checkpoint_files_digest(ckpt_dir)
    uio.write_manifest(
        out, "train", config.to_dict(), {"train": config.seed, "dataset": config.dataset.seed}, digest,
        [str(ckpt_dir), str(out / "loss.csv")],
    )
    losses = result.losses()
    print(f"trained {config.steps} steps; loss {losses[:100].mean():.4f} -> {losses[-100:].mean():.4f}")
    print(f"checkpoint {ckpt_dir} sha256 {digest}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.denoiser(use_ema=not args.no_ema)
    guidance = _guidance(args)
    kw = {"guidance": guidance} if guidance else {"class_id": args.class_id}
    if args.count < 1:
        raise UsageError("--count must be positive")
    results = sample_many(model, ckpt.schedule, ckpt.kernel, args.seed, args.count, threads=args.threads,
                          zero_noise=args.zero_noise, **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = uio.checkpoint_files_digest(args.checkpoint)
    artifacts = []
    for i, (img, rec) in enumerate(results):
        rec.meta["stream"] = i
        paths = uio.save_sample(img, out / f"sample_{i:03d}", _sidecar(rec, digest))
        lat = uio.save_latent(rec, out / f"sample_{i:03d}.lat")
        artifacts += list(paths.values()) + [str(lat)]
    cfg = {"checkpoint": str(args.checkpoint), "count": args.count, "guidance": args.guidance,
           "class_id": args.class_id, "use_ema": not args.no_ema, "zero_noise": args.zero_noise}
    uio.write_manifest(out, "sample", cfg, {"seed": args.seed, "streams": list(range(args.count))}, digest, artifacts)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def _parse_grid(text: str):
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--grid must look like 4x4, got {text!r}") from exc
    return r, c


def cmd_interpolate(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.denoiser(use_ema=not args.no_ema)
    if len(args.corners) != 4:
        raise UsageError("--corners takes four latent directories (top-left, top-right, bottom-left, bottom-right)")
    corners = tuple(uio.load_latent(p) for p in args.corners)
    rows, cols = _parse_grid(args.grid)
    grid = InterpolationGrid(corners, rows, cols)
    replay = _replay_kwargs(corners[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = uio.checkpoint_files_digest(args.checkpoint)
    images, artifacts = [], []
    for (i, j), rec in grid.cells():
        img, _ = sample(model, ckpt.schedule, ckpt.kernel, record=rec, **replay)
        stem = out / f"cell_{i}_{j}"
        artifacts += list(uio.save_sample(img, stem, _sidecar(rec, digest, {"cell": [i, j]})).values())
        artifacts.append(str(uio.save_latent(rec, stem.with_suffix(".lat"))))
        images.append(img.data)
    uio.save_png(uio.tile(images, rows, cols), out / "grid.png")
    artifacts.append(str(out / "grid.png"))
    cfg = {"checkpoint": str(args.checkpoint), "corners": [str(p) for p in args.corners], "grid": [rows, cols],
           "use_ema": not args.no_ema}
    uio.write_manifest(out, "interpolate", cfg, {"corners": [c.seed for c in corners]}, digest, artifacts)
    print(f"wrote {rows * cols} cells to {out}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.denoiser(use_ema=not args.no_ema)
    record = uio.load_latent(args.latent)
    try:
        rec = perturb(record, args.step, args.eps, RngStream(args.seed, 0))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    img, _ = sample(model, ckpt.schedule, ckpt.kernel, record=rec, **_replay_kwargs(record))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = uio.checkpoint_files_digest(args.checkpoint)
    artifacts = list(uio.save_sample(img, out / "perturbed", _sidecar(rec, digest)).values())
    artifacts.append(str(uio.save_latent(rec, out / "perturbed.lat")))
    cfg = {"checkpoint": str(args.checkpoint), "latent": str(args.latent), "step": args.step, "eps": args.eps,
           "use_ema": not args.no_ema}
    uio.write_manifest(out, "perturb", cfg, {"seed": args.seed}, digest, artifacts)
    print(f"perturbed step {args.step} by eps={args.eps}; wrote {out}")
    return EXIT_OK


def cmd_elbo(args) -> int:
    from .denoiser import OracleDenoiser
    from .diffusion import elbo_report
    from .training import ToyDataset

    ckpt = _load_checkpoint(args.checkpoint)
    ds = ToyDataset(**ckpt.config["dataset"])
    model = ckpt.denoiser(use_ema=not args.no_ema)
    reports = []
    for i in range(min(args.count, len(ds))):
        x0, label = ds[i]
        m = OracleDenoiser(x0) if args.oracle else model
        rep = elbo_report(x0, m, ckpt.schedule, ckpt.kernel, RngStream(args.seed, i), class_id=label)
        reports.append(rep.to_dict())
    totals = np.array([r["total"] for r in reports])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"per_image": reports, "mean_total": float(totals.mean())}
    (out / "elbo.json").write_text(json.dumps(doc, indent=2))
    cfg = {"checkpoint": str(args.checkpoint), "count": args.count, "oracle": args.oracle, "use_ema": not args.no_ema}
    uio.write_manifest(out, "elbo", cfg, {"seed": args.seed}, uio.checkpoint_files_digest(args.checkpoint),
                       [str(out / "elbo.json")])
    print(f"mean negative bound over {len(reports)} images: {doc['mean_total']:.4f} nats")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udpm", description="Upsampling diffusion models: verify, train, sample and edit latents.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle verification suite")
    v.add_argument("--filter", help="only run checks whose name contains this string")
    v.add_argument("--report", help="write the JSON report here")
    v.add_argument("--out", help="directory for a run manifest")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mc-draws", type=int, default=100_000)
    v.add_argument("--kernel-scale", type=float, default=1.0, help="scale the box kernels (1.1 corrupts the norm)")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train a denoiser on a toy dataset")
    t.add_argument("config", help="JSON training config")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field (repeatable)")
    t.set_defaults(func=cmd_train)

    def model_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--no-ema", action="store_true", help="use live weights instead of the EMA shadow")

    s = sub.add_parser("sample", help="generate images and their latent records")
    model_args(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--guidance", type=float)
    s.add_argument("--class", dest="class_id", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--zero-noise", action="store_true")
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("interpolate", help="bilinear grid over four latent records")
    model_args(i)
    i.add_argument("--corners", nargs="+", required=True)
    i.add_argument("--grid", default="4x4")
    i.set_defaults(func=cmd_interpolate)

    q = sub.add_parser("perturb", help="nudge one noise map of a latent record")
    model_args(q)
    q.add_argument("--latent", required=True)
    q.add_argument("--step", type=int, required=True)
    q.add_argument("--eps", type=float, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_perturb)

    e = sub.add_parser("elbo", help="variational bound on the checkpoint's training images")
    model_args(e)
    e.add_argument("--count", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--oracle", action="store_true", help="use the perfect denoiser")
    e.set_defaults(func=cmd_elbo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"udpm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"udpm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
