"""Command-line entry point.

Subcommands: gen-data, train, verify, eval-dscore, eval-transfer, swap,
interpolate, plot-latents. Configuration comes from defaults, then an
optional key=value config file, then CLI flags / --set overrides, in that
order. Every run writes a manifest (resolved config, seed, sha256 of each
artifact) into the output directory, so any output can be reproduced from
its manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from fsvae import evaluation, figures
from fsvae.datasets import (
    BounceConfig,
    BouncingDigits,
    RotatingShapes,
    ShapeConfig,
    concat_batches,
    digit_sprites,
    mnist_sprites,
    read_shards,
    write_shards,
)
from fsvae.priors import PriorConfig, sample_static_prior, sample_temporal_prior
from fsvae.training import TrainConfig, load_model, train
from fsvae.verify import run_verify

DATA_DEFAULTS = {
    "data.dataset": "bouncing-mnist",
    "data.digit_classes": "0,1,2,3,4,5,6,7,8,9",
    "data.speed": "3.0",
    "data.sprite_variants": "20",
    "data.mnist_images": "",
    "data.mnist_labels": "",
    "data.n_shapes": "25",
    "data.held_out_ids": "15,16,17,18,19,20,21,22,23,24",
    "data.angular_velocity": str(2.0 * np.pi / 24.0),
}

TRAIN_KEYS = {
    "iterations": int,
    "batch_videos": int,
    "lr0": float,
    "lr_decay": float,
    "lr_step": int,
    "beta": float,
    "variant": str,
    "net_preset": str,
    "seed": int,
    "checkpoint_every": int,
    "log_every": int,
}
PRIOR_KEYS = {"prior.sigma2_s": float, "prior.sigma2_t": float, "prior.f_s": int, "prior.f_t": int, "prior.n_frames": int}


def parse_config_file(path: Path) -> dict[str, str]:
    out = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SystemExit(f"config line is not key=value: {raw!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args) -> dict[str, str]:
    cfg: dict[str, str] = dict(DATA_DEFAULTS)
    defaults = TrainConfig()
    for key in TRAIN_KEYS:
        cfg[key] = str(getattr(defaults, key))
    for key in PRIOR_KEYS:
        cfg[key] = str(getattr(defaults.prior, key.split(".", 1)[1]))
    if args.config:
        cfg.update(parse_config_file(Path(args.config)))
    for flag in ("seed", "beta", "variant"):
        if getattr(args, flag, None) is not None:
            cfg[flag] = str(getattr(args, flag))
    if getattr(args, "preset", None) is not None:
        cfg["net_preset"] = args.preset
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = value.strip()
    return cfg


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    prior = PriorConfig(**{k.split(".", 1)[1]: t(cfg[k]) for k, t in PRIOR_KEYS.items()})
    kwargs = {k: t(cfg[k]) for k, t in TRAIN_KEYS.items()}
    return TrainConfig(prior=prior, **kwargs)


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


def build_stream(cfg: dict[str, str], train_cfg: TrainConfig, seed_offset: int = 0, held_out: bool = False):
    """Dataset stream for training (train split) or evaluation (held-out ids)."""
    seed = train_cfg.seed + seed_offset
    if cfg["data.dataset"] == "bouncing-mnist":
        bounce = BounceConfig(
            speed=float(cfg["data.speed"]),
            n_frames=train_cfg.prior.n_frames,
            digit_classes=_int_tuple(cfg["data.digit_classes"]),
            seed=seed,
        )
        if cfg["data.mnist_images"]:
            sprites, labels = mnist_sprites(
                cfg["data.mnist_images"], cfg["data.mnist_labels"], bounce.digit_classes
            )
        else:
            sprites, labels = digit_sprites(
                bounce.digit_classes, int(cfg["data.sprite_variants"]), seed=bounce.seed
            )
        return BouncingDigits(bounce, sprites, labels), bounce
    if cfg["data.dataset"] == "rotating-shapes":
        shape = ShapeConfig(
            n_shapes=int(cfg["data.n_shapes"]),
            held_out_ids=_int_tuple(cfg["data.held_out_ids"]),
            angular_velocity=float(cfg["data.angular_velocity"]),
            n_frames=train_cfg.prior.n_frames,
            seed=seed,
        )
        ids = shape.held_out_ids if held_out else None
        return RotatingShapes(shape, shape_ids=ids), shape
    raise SystemExit(f"unknown dataset {cfg['data.dataset']!r}")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict[str, str], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": dict(sorted(cfg.items())),
        "seed": cfg.get("seed"),
        "outputs": {p.name: sha256_file(p) for p in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_batch(args, cfg: dict[str, str], train_cfg: TrainConfig, n_videos: int):
    """Evaluation videos: a shard file when given, else a fresh seed stream."""
    if getattr(args, "shard", None):
        batch = concat_batches(read_shards(args.shard))
        if batch.angles is not None:
            return batch, ShapeConfig(seed=train_cfg.seed)
        return batch, BounceConfig(speed=float(cfg["data.speed"]), n_frames=batch.n_frames)
    stream, data_cfg = build_stream(cfg, train_cfg, seed_offset=7919, held_out=True)
    return stream.batch(0, n_videos), data_cfg


def _feature_table(model, batch, data_cfg, seed: int):
    feats = evaluation_features(model, batch)
    if isinstance(data_cfg, BounceConfig):
        return evaluation.frame_table(batch, feats, data_cfg)
    return evaluation.order_table(batch, feats, per_video=4, seed=seed)


def evaluation_features(model, batch):
    from fsvae.networks import encode_features

    return encode_features(model, batch.frames)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    train_cfg = train_config_from(cfg)
    stream, _ = build_stream(cfg, train_cfg)
    per_record = min(args.videos, 64)
    batches = []
    produced = 0
    it = 0
    while produced < args.videos:
        take = min(per_record, args.videos - produced)
        batches.append(stream.batch(it, take))
        produced += take
        it += 1
    path = out / "data.fsvd"
    write_shards(batches, path)
    write_manifest(out, "gen-data", cfg, [path])
    print(f"wrote {produced} videos to {path}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    train_cfg = train_config_from(cfg)
    stream, _ = build_stream(cfg, train_cfg)
    resume = None
    if args.resume:
        resume = Path(args.resume).read_bytes()
    result = train(train_cfg, stream, out_dir=str(out), resume_from=resume)
    outputs = [out / "checkpoint.fsvae", out / "metrics.csv"]
    outputs += sorted(out.glob("checkpoint_*.fsvae"))
    write_manifest(out, "train", cfg, outputs)
    last = result.metrics[-1]
    print(f"finished {train_cfg.iterations} iterations; final elbo {last['elbo']:.2f}")
    return 0


def cmd_verify(args) -> int:
    report = run_verify(seed=int(args.seed or 0))
    print(report.render())
    if args.out:
        out = _out_dir(args)
        path = out / "verify.txt"
        path.write_text(report.render() + "\n")
        write_manifest(out, "verify", resolve_config(args), [path])
    return 0 if report.passed else 1


def cmd_eval_dscore(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    model, train_cfg = load_model(args.checkpoint)
    batch, data_cfg = _eval_batch(args, cfg, train_cfg, args.videos)
    table = _feature_table(model, batch, data_cfg, train_cfg.seed)
    modes = ["natural", "max"] if args.mode == "both" else [args.mode]
    lines = ["model,beta,mode,score,acc_ss,acc_st,acc_tt,acc_ts"]
    for mode in modes:
        res = evaluation.disentanglement_score(
            table, f_s=train_cfg.prior.f_s, mode=mode, seed=train_cfg.seed
        )
        accs = ",".join(format(a, ".4f") for a in res.accuracies)
        lines.append(f"{train_cfg.variant},{train_cfg.beta},{mode},{res.score:.4f},{accs}")
    path = out / "dscore.csv"
    path.write_text("\n".join(lines) + "\n")
    write_manifest(out, "eval-dscore", cfg, [path])
    print("\n".join(lines))
    return 0


def cmd_eval_transfer(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    model, train_cfg = load_model(args.checkpoint)
    batch, data_cfg = _eval_batch(args, cfg, train_cfg, args.videos)
    table = _feature_table(model, batch, data_cfg, train_cfg.seed)
    cols = tuple(range(train_cfg.prior.f_s)) if train_cfg.variant == "factored" else None
    acc = evaluation.transfer_accuracy(table, cols=cols, seed=train_cfg.seed)
    path = out / "transfer.csv"
    path.write_text("model,beta,features,accuracy\n"
                    f"{train_cfg.variant},{train_cfg.beta},{len(cols) if cols else table.width},{acc:.4f}\n")
    write_manifest(out, "eval-transfer", cfg, [path])
    print(f"transfer accuracy {acc:.4f}")
    return 0


def _prior_latents(train_cfg: TrainConfig, seed: int, n: int) -> np.ndarray:
    prior = train_cfg.prior
    hs = sample_static_prior(prior, seed, n_videos=n)
    ht = sample_temporal_prior(prior, seed, n_videos=n)
    return np.concatenate([hs, ht], axis=-1)


def cmd_swap(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    model, train_cfg = load_model(args.checkpoint)
    seed = int(cfg["seed"])
    h = _prior_latents(train_cfg, seed, 2)
    grid = figures.swap_grid(model, h[0], h[1], train_cfg.prior.f_s)
    path = out / "swap.pgm"
    figures.write_pgm(grid, path)
    write_manifest(out, "swap", cfg, [path])
    print(f"wrote {path}")
    return 0


def cmd_interpolate(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    model, train_cfg = load_model(args.checkpoint)
    seed = int(cfg["seed"])
    h = _prior_latents(train_cfg, seed, 2)
    path_lats = figures.interpolate_latents(h[0], h[1], args.steps, args.factor, train_cfg.prior.f_s)
    from fsvae.networks import decode_frames

    decoded = decode_frames(model, path_lats)  # [steps, N, 64, 64]
    path = out / f"interpolate_{args.factor}.pgm"
    figures.emit_pgm_grid(decoded[:, 0], 1, args.steps, path)
    write_manifest(out, "interpolate", cfg, [path])
    print(f"wrote {path}")
    return 0


def cmd_plot_latents(args) -> int:
    out = _out_dir(args)
    cfg = resolve_config(args)
    model, train_cfg = load_model(args.checkpoint)
    batch, _ = _eval_batch(args, cfg, train_cfg, args.videos)
    csv_path = out / "latents.csv"
    figures.plot_latents(
        model,
        batch.frames,
        train_cfg.prior.f_s,
        seed=int(cfg["seed"]),
        csv_path=csv_path,
        scatter_prefix=str(out / "latents"),
    )
    outputs = [csv_path] + sorted(out.glob("latents_*.pgm"))
    write_manifest(out, "plot-latents", cfg, outputs)
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--seed", type=int, help="64-bit run seed")
        p.add_argument("--variant", choices=["factored", "slow", "vae"])
        p.add_argument("--beta", type=float, help="KL regularization strength")
        p.add_argument("--preset", choices=["paper", "desk"], help="network preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("gen-data", help="materialize videos to a shard file")
    common(p)
    p.add_argument("--videos", type=int, default=256)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="run the analytic-vs-oracle property suite")
    common(p, needs_out=False)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("eval-dscore", help="disentanglement score of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shard", help="evaluate on a materialized shard file")
    p.add_argument("--videos", type=int, default=400)
    p.add_argument("--mode", choices=["natural", "max", "both"], default="both")
    p.set_defaults(fn=cmd_eval_dscore)

    p = sub.add_parser("eval-transfer", help="static-task transfer accuracy")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shard", help="evaluate on a materialized shard file")
    p.add_argument("--videos", type=int, default=400)
    p.set_defaults(fn=cmd_eval_transfer)

    p = sub.add_parser("swap", help="decode a 2x2 factor-swap grid from prior samples")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_swap)

    p = sub.add_parser("interpolate", help="decode a latent interpolation strip")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--factor", choices=["static", "temporal"], default="static")
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("plot-latents", help="dump sampled encodings to CSV (+ scatter)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shard", help="evaluate on a materialized shard file")
    p.add_argument("--videos", type=int, default=6)
    p.set_defaults(fn=cmd_plot_latents)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("FSVAE_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
