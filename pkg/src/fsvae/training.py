"""Training loop: Adam over the beta-weighted ELBO with step LR decay.

Every source of randomness is keyed by (seed, iteration): the data stream
draws batch i from a counter-derived sub-seed and the reparameterization
noise generator is reseeded per iteration. Together with checkpointing of
the optimizer moments and batch-norm statistics this makes runs bit-for-bit
replayable, and a resumed run's metric log identical to the uninterrupted
one from the resume point on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from fsvae import checkpoints
from fsvae.datasets import _derived_seed
from fsvae.losses import MODEL_VARIANTS, elbo
from fsvae.networks import VideoModel, get_preset, reparam_sample
from fsvae.priors import PriorConfig

METRIC_COLUMNS = ("iter", "lr", "elbo", "recon", "kl", "entropy", "static_ce", "temporal_ce")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    batch_videos: int = 64
    lr0: float = 0.001
    lr_decay: float = 0.1
    lr_step: int = 10000
    beta: float = 1.0
    variant: str = "factored"
    prior: PriorConfig = field(default_factory=PriorConfig)
    net_preset: str = "paper"
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_videos < 1 or self.lr_step < 1 or self.log_every < 1:
            raise ValueError("iteration, batch, and period counts must be positive")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {MODEL_VARIANTS}")
        get_preset(self.net_preset)

    @property
    def latent_width(self) -> int:
        return self.prior.f_total


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * lr_decay ** floor(iteration / lr_step)."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return cfg.lr0 * cfg.lr_decay ** (iteration // cfg.lr_step)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam descent step on the given gradients, in place."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names do not match")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name}")
            if not torch.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name} at step {state.t}")
            state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = state.m[name] / bc1
            v_hat = state.v[name] / bc2
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))


# ---------------------------------------------------------------------------
# Checkpoint assembly


_PRIOR_KEYS = ("sigma2_s", "sigma2_t", "f_s", "f_t", "n_frames")
_TRAIN_KEYS = (
    "iterations",
    "batch_videos",
    "lr0",
    "lr_decay",
    "lr_step",
    "beta",
    "variant",
    "net_preset",
    "seed",
    "checkpoint_every",
    "log_every",
)


def config_to_fields(cfg: TrainConfig) -> dict[str, str]:
    fields = {f"train.{k}": repr(getattr(cfg, k)) for k in _TRAIN_KEYS}
    fields.update({f"prior.{k}": repr(getattr(cfg.prior, k)) for k in _PRIOR_KEYS})
    return fields


def config_from_fields(fields: dict[str, str]) -> TrainConfig:
    def parse(v: str):
        if v in ("True", "False"):
            return v == "True"
        try:
            return int(v)
        except ValueError:
            pass
        try:
            return float(v)
        except ValueError:
            return v.strip("'\"")

    prior = PriorConfig(**{k: parse(fields[f"prior.{k}"]) for k in _PRIOR_KEYS})
    kwargs = {k: parse(fields[f"train.{k}"]) for k in _TRAIN_KEYS}
    return TrainConfig(prior=prior, **kwargs)


def build_checkpoint(model: VideoModel, adam: AdamState, cfg: TrainConfig, iteration: int) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        tensors[f"model.{name}"] = tensor.detach().cpu().numpy()
    for name in adam.m:
        tensors[f"adam.m.{name}"] = adam.m[name].detach().cpu().numpy()
        tensors[f"adam.v.{name}"] = adam.v[name].detach().cpu().numpy()
    fields = config_to_fields(cfg)
    fields["adam.t"] = str(adam.t)
    fields["iteration"] = str(iteration)
    return checkpoints.pack_checkpoint(tensors, fields)


def restore_checkpoint(data: bytes) -> tuple[VideoModel, AdamState, TrainConfig, int]:
    tensors, fields = checkpoints.unpack_checkpoint(data)
    cfg = config_from_fields(fields)
    model = build_model(cfg)
    state = model.state_dict()
    for name, tensor in state.items():
        src = tensors[f"model.{name}"]
        tensor.copy_(torch.from_numpy(src).to(tensor.dtype))
    params = dict(model.named_parameters())
    adam = adam_init(params)
    adam.t = int(fields["adam.t"])
    for name, p in params.items():
        adam.m[name] = torch.from_numpy(tensors[f"adam.m.{name}"]).to(p.dtype)
        adam.v[name] = torch.from_numpy(tensors[f"adam.v.{name}"]).to(p.dtype)
    return model, adam, cfg, int(fields["iteration"])


def load_model(path) -> tuple[VideoModel, TrainConfig]:
    with open(path, "rb") as f:
        model, _, cfg, _ = restore_checkpoint(f.read())
    model.eval()
    return model, cfg


def build_model(cfg: TrainConfig) -> VideoModel:
    return VideoModel(cfg.net_preset, cfg.latent_width, seed=_derived_seed(cfg.seed, 1))


# ---------------------------------------------------------------------------
# Metrics log


def format_metric_row(row: dict[str, float]) -> str:
    cells = [str(int(row["iter"]))]
    cells += [format(float(row[k]), ".17g") for k in METRIC_COLUMNS[1:]]
    return ",".join(cells)


def render_metrics_csv(rows: list[dict[str, float]]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    lines += [format_metric_row(r) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Main loop


@dataclass
class TrainResult:
    model: VideoModel
    adam: AdamState
    cfg: TrainConfig
    metrics: list[dict[str, float]]
    final_checkpoint: bytes


def train(
    cfg: TrainConfig,
    stream,
    out_dir=None,
    resume_from: bytes | None = None,
) -> TrainResult:
    """Run the optimization loop over an infinite video stream.

    stream.batch(iteration, n_videos) must return a VideoBatch whose
    content depends only on (stream seed, iteration). When out_dir is
    given, metrics.csv and checkpoint files are written there. Resuming
    from a checkpoint restores its config wholesale, so the continued log
    matches what the uninterrupted run would have produced.
    """
    if resume_from is not None:
        model, adam, cfg, start = restore_checkpoint(resume_from)
    else:
        model = build_model(cfg)
        adam = adam_init(dict(model.named_parameters()))
        start = 0
    params = dict(model.named_parameters())

    metrics: list[dict[str, float]] = []
    checkpoint_bytes = b""
    for it in range(start, cfg.iterations):
        step = it + 1
        lr = lr_schedule(it, cfg)
        vb = stream.batch(it, cfg.batch_videos)
        frames = torch.from_numpy(vb.frames)

        model.train()
        noise_gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, 2, it))
        post = model.encode(frames)
        h = reparam_sample(post, generator=noise_gen)
        probs = model.decode(h)
        terms = elbo(post, probs, frames, cfg.beta, cfg.prior, cfg.variant)
        loss = -terms.elbo_value
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}: {terms.detach_floats()}")

        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {
            name: p.grad if p.grad is not None else torch.zeros_like(p) for name, p in params.items()
        }
        adam_step(params, grads, adam, lr)

        if step == 1 or step % cfg.log_every == 0 or step == cfg.iterations:
            vals = terms.detach_floats()
            metrics.append(
                {
                    "iter": step,
                    "lr": lr,
                    "elbo": vals["elbo_value"],
                    "recon": vals["recon_loglik"],
                    "kl": vals["kl"],
                    "entropy": vals["entropy"],
                    "static_ce": vals["static_ce"],
                    "temporal_ce": vals["temporal_ce"],
                }
            )
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.iterations:
            if out_dir is not None:
                data = build_checkpoint(model, adam, cfg, step)
                with open(f"{out_dir}/checkpoint_{step:07d}.fsvae", "wb") as f:
                    f.write(data)

    checkpoint_bytes = build_checkpoint(model, adam, cfg, cfg.iterations)
    if out_dir is not None:
        with open(f"{out_dir}/checkpoint.fsvae", "wb") as f:
            f.write(checkpoint_bytes)
        with open(f"{out_dir}/metrics.csv", "w") as f:
            f.write(render_metrics_csv(metrics))
    model.eval()
    return TrainResult(model=model, adam=adam, cfg=cfg, metrics=metrics, final_checkpoint=checkpoint_bytes)
