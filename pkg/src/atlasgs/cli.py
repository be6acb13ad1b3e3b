"""Single executable driving the full pipeline.

Subcommands: datagen, train-vae, train-ldm, generate, render, export-ply,
eval, check. Exit codes: 0 success, 1 usage, 2 data error, 3 check failure.
``--seed`` and ``--threads`` defaults honor the ATLASG_SEED / ATLASG_THREADS
environment variables; flags always win over config files.
"""
from __future__ import annotations

import argparse
import os
import sys

import torch

from . import check as checkmod
from . import config as configmod
from .atlas import count_parameters, export_ply, import_ply, sample_uv_grid
from .checkpoint import load_tensors, save_tensors
from .datagen import (SHAPE_KINDS, ShapeSpec, generate_record, read_dataset,
                      training_tensors, write_dataset)
from .diffusion import EDMConfig, load_ldm_checkpoint, sample, train_ldm
from .geometry import chamfer
from .render import load_cameras, rasterize, turntable_cameras
from .util import DataError, NonFiniteError, generator
from .vae import (VAEConfig, evaluate_psnr, export_latents, load_vae_checkpoint,
                  train_vae)
from . import imgio


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _env(name: str, fallback, cast):
    raw = os.environ.get(f"ATLASG_{name}")
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        return fallback


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_env("SEED", 0, int),
                   help="base seed for end-to-end determinism")
    p.add_argument("--threads", type=int, default=_env("THREADS", 1, int),
                   help="torch CPU threads (1 = bitwise reproducible)")


def _print_config(title: str, config=None, **extra) -> None:
    print(f"== {title} ==")
    if config is not None:
        print(configmod.format_config(config))
    for key, value in extra.items():
        print(f"{key} = {value}")


def _vae_config_from_args(args) -> VAEConfig:
    cfg = VAEConfig()
    if getattr(args, "config", None):
        cfg = configmod.apply_overrides(cfg, configmod.parse_kv_file(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return configmod.apply_overrides(cfg, overrides)


def cmd_datagen(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    for c in classes:
        if c not in SHAPE_KINDS:
            raise DataError(f"unknown class {c!r}; known: {', '.join(SHAPE_KINDS)}")
    specs = []
    for label, kind in enumerate(classes):
        for i in range(args.shapes):
            shape_id = f"{kind}_{i:03d}"
            gen = generator(args.seed, "spec", shape_id)

            def u(lo, hi, g=gen):
                return lo + (hi - lo) * float(torch.rand((), generator=g))

            if kind == "sphere":
                params = {"radius": u(0.7, 1.0)}
            elif kind == "box":
                params = {"extents": (u(0.45, 0.95), u(0.45, 0.95), u(0.45, 0.95))}
            elif kind == "torus":
                params = {"major_radius": u(0.5, 0.7), "minor_radius": u(0.15, 0.3)}
            else:
                params = {"axes": (u(0.5, 0.95), u(0.5, 0.95), u(0.5, 0.95)),
                          "eps1": u(0.6, 1.5), "eps2": u(0.6, 1.5)}
            specs.append(ShapeSpec(kind=kind, shape_id=shape_id, label=label,
                                   n_points=args.points, n_teacher=args.teacher,
                                   params=params))
    _print_config("datagen", out=args.out, shapes=args.shapes,
                  classes=",".join(classes), points=args.points,
                  teacher=args.teacher, image_size=args.image_size, seed=args.seed)
    records = [generate_record(spec, args.seed, args.image_size) for spec in specs]
    write_dataset(records, args.out)
    per_class = {c: sum(1 for s in specs if s.kind == c) for c in classes}
    print(f"wrote {len(records)} shape directories to {args.out} "
          f"({', '.join(f'{k}: {v}' for k, v in per_class.items())})")
    return 0


def _load_training_records(data_dir: str, cfg: VAEConfig):
    records = read_dataset(data_dir)
    return [training_tensors(r, cfg.views) for r in records]


def cmd_train_vae(args) -> int:
    cfg = _vae_config_from_args(args)
    steps1, steps2 = args.steps1, args.steps2
    resume = args.resume
    if args.stage == "1":
        steps2 = 0
    elif args.stage == "2":
        if resume is None:
            raise DataError("--stage 2 requires --resume with a stage-1 checkpoint")
        _, meta, _ = load_vae_checkpoint(resume)
        steps1 = int(meta.get("step", 0))
    _print_config("train-vae", cfg, data=args.data, out=args.out,
                  stage=args.stage, steps_stage1=steps1, steps_stage2=steps2,
                  lr=args.lr, seed=args.seed, resume=resume)
    records = _load_training_records(args.data, cfg)
    result = train_vae(records, cfg, args.out, args.seed,
                       steps_stage1=steps1, steps_stage2=steps2, lr=args.lr,
                       checkpoint_every=args.checkpoint_every, resume=resume)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics: {result['metrics_csv']}")
    print(f"final psnr train/holdout: {result['psnr_train']:.2f}/"
          f"{result['psnr_holdout']:.2f} dB")
    return 0


def cmd_train_ldm(args) -> int:
    vae, _, _ = load_vae_checkpoint(args.vae)
    cfg = EDMConfig(n=vae.cfg.n, d0=vae.cfg.d0, width=args.width,
                    blocks=args.blocks, steps=args.steps_sample,
                    condition=args.condition,
                    num_classes=args.num_classes)
    if args.latents and os.path.exists(args.latents):
        latents = load_tensors(args.latents)
        labels = None
        latents_path = args.latents
    else:
        records = _load_training_records(args.data, vae.cfg)
        latents = export_latents(vae, records)
        labels = {r.shape_id: r.label for r in records}
        os.makedirs(args.out, exist_ok=True)
        latents_path = args.latents or os.path.join(args.out, "latents.atlg")
        save_tensors(latents_path, latents)
    _print_config("train-ldm", cfg, vae=args.vae, out=args.out,
                  steps=args.steps, lr=args.lr, seed=args.seed,
                  latents=latents_path, resume=args.resume)
    result = train_ldm(latents, cfg, args.out, args.seed, steps=args.steps,
                       lr=args.lr, labels=labels, resume=args.resume)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics: {result['metrics_csv']}")
    print(f"loss ema: {result['loss_ema']:.6f}")
    return 0


def cmd_generate(args) -> int:
    vae, _, _ = load_vae_checkpoint(args.vae)
    ldm, _, _ = load_ldm_checkpoint(args.ldm)
    if vae.cfg.n != ldm.cfg.n or vae.cfg.d0 != ldm.cfg.d0:
        raise DataError(f"latent shape mismatch: VAE ({vae.cfg.n}, {vae.cfg.d0}) "
                        f"vs LDM ({ldm.cfg.n}, {ldm.cfg.d0})")
    alpha = args.alpha or vae.cfg.alpha
    params_loaded = count_parameters(vae) + count_parameters(ldm)
    _print_config("generate", vae=args.vae, ldm=args.ldm, out=args.out,
                  count=args.count, alpha=alpha, steps=args.steps,
                  views=args.views, seed=args.seed)
    # sampling-count invariance: the UV grid never touches the weights
    print(f"parameters loaded: {params_loaded}")
    os.makedirs(args.out, exist_ok=True)
    labels = None
    if ldm.cfg.condition == "class":
        labels = torch.full((args.count,), args.label, dtype=torch.long)
    latents = sample(ldm, args.count, generator(args.seed, "sample"),
                     steps=args.steps, labels=labels)
    grid = sample_uv_grid(alpha)
    cams = turntable_cameras(args.views, args.image_size) if args.views else []
    for i in range(args.count):
        with torch.no_grad():
            splats = vae.decode_gaussians(latents[i], grid)
        splats.validate()
        ply_path = os.path.join(args.out, f"sample_{i}.ply")
        export_ply(ply_path, splats)
        print(f"sample_{i}: {len(splats)} gaussians -> {ply_path}")
        for k, cam in enumerate(cams):
            with torch.no_grad():
                out = rasterize(splats, cam)
            imgio.write_ppm(os.path.join(args.out, f"sample_{i}_view_{k}.ppm"), out.rgb)
    assert params_loaded == count_parameters(vae) + count_parameters(ldm)
    return 0


def cmd_render(args) -> int:
    splats = import_ply(args.ply)
    cameras = load_cameras(args.cameras)
    _print_config("render", ply=args.ply, cameras=args.cameras, out=args.out,
                  count=len(cameras))
    os.makedirs(args.out, exist_ok=True)
    for k, cam in enumerate(cameras):
        with torch.no_grad():
            out = rasterize(splats, cam)
        imgio.write_ppm(os.path.join(args.out, f"rgb_{k}.ppm"), out.rgb)
        imgio.write_pgm(os.path.join(args.out, f"alpha_{k}.pgm"), out.alpha)
        imgio.write_pgm(os.path.join(args.out, f"depth_{k}.pgm"), out.depth / cam.far)
    print(f"rendered {len(cameras)} views to {args.out}")
    return 0


def cmd_export_ply(args) -> int:
    vae, _, _ = load_vae_checkpoint(args.vae)
    latents = load_tensors(args.latents)
    ids = [args.id] if args.id else sorted(latents)
    alpha = args.alpha or vae.cfg.alpha
    _print_config("export-ply", vae=args.vae, latents=args.latents,
                  ids=",".join(ids), alpha=alpha, out=args.out)
    os.makedirs(args.out, exist_ok=True)
    grid = sample_uv_grid(alpha)
    for shape_id in ids:
        if shape_id not in latents:
            raise DataError(f"shape id {shape_id!r} not in {args.latents}")
        with torch.no_grad():
            splats = vae.decode_gaussians(
                latents[shape_id].to(torch.get_default_dtype()), grid)
        path = os.path.join(args.out, f"{shape_id}.ply")
        export_ply(path, splats)
        print(f"{shape_id}: {len(splats)} gaussians -> {path}")
    return 0


def cmd_eval(args) -> int:
    vae, _, _ = load_vae_checkpoint(args.vae)
    records = _load_training_records(args.data, vae.cfg)
    _print_config("eval", vae=args.vae, data=args.data, out=args.out)
    rows = []
    for rec in records:
        p_train, p_hold = evaluate_psnr(vae, rec)
        with torch.no_grad():
            mean, _ = vae.encode(rec.points, rec.images, rec.fps_idx)
            patches, _ = vae.decode_latent(mean)
            cd = float(chamfer(patches.centers, rec.points))
        rows.append((rec.shape_id, p_train, p_hold, cd))
    with open(args.out, "w") as fh:
        fh.write("shape_id,psnr_train,psnr_holdout,chamfer_centers\n")
        for shape_id, p_train, p_hold, cd in rows:
            fh.write(f"{shape_id},{p_train:.4f},{p_hold:.4f},{cd:.6g}\n")
    mean_train = sum(r[1] for r in rows) / len(rows)
    mean_hold = sum(r[2] for r in rows) / len(rows)
    print(f"eval over {len(rows)} shapes: psnr train {mean_train:.2f} dB, "
          f"holdout {mean_hold:.2f} dB -> {args.out}")
    return 0


def cmd_check(args) -> int:
    _print_config("check", report=args.report, seed=args.seed,
                  inject_error=args.inject_error)
    report = checkmod.run_checks(seed=args.seed, inject_error=args.inject_error)
    print(checkmod.format_report(report))
    if args.report:
        checkmod.write_report(report, args.report)
        print(f"report written to {args.report}")
    return 0 if report["pass"] else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="atlasgs", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", type=int, default=8, help="shapes per class")
    p.add_argument("--classes", default=",".join(SHAPE_KINDS))
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--teacher", type=int, default=512)
    p.add_argument("--image-size", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train-vae", help="two-stage VAE training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--steps1", type=int, default=800)
    p.add_argument("--steps2", type=int, default=1200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (wins over --config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=500)
    _add_common(p)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="latent diffusion training (exports latents first)")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--steps-sample", type=int, default=40)
    p.add_argument("--condition", choices=("none", "class"), default="none")
    p.add_argument("--num-classes", type=int, default=0)
    p.add_argument("--latents", help="latent container path (reused if present)")
    p.add_argument("--resume")
    _add_common(p)
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("generate", help="sample latents and decode splats")
    p.add_argument("--vae", required=True)
    p.add_argument("--ldm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--alpha", type=int, default=0,
                   help="UV grid resolution (0 = VAE config default)")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--views", type=int, default=4, help="turntable renders per sample")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--label", type=int, default=0, help="class id for conditional models")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render a splat PLY from a camera file")
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-ply", help="decode latents from a container to PLY")
    p.add_argument("--vae", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--id", help="shape id (default: all)")
    p.add_argument("--alpha", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("eval", help="PSNR / chamfer metrics of a trained VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", default="eval.csv")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the verification suite")
    p.add_argument("--report", default="check_report.json")
    p.add_argument("--inject-error", action="store_true",
                   help="negative control: corrupt one check on purpose")
    _add_common(p)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.command == "datagen" and args.shapes < 1:
        print("atlasgs datagen: error: --shapes must be >= 1", file=sys.stderr)
        return 1
    torch.set_num_threads(max(getattr(args, "threads", 1), 1))
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
