"""Sequence priors over latent trajectories.

Two factors make up the prior over a latent sequence h_1..h_N:

* static factor: a per-video anchor drawn from N(0, I), with every frame's
  static latent drawn independently around it with variance sigma2_s. The
  anchor is marginalized analytically in the density, so the exact log-pdf
  depends only on the per-feature mean and mean-square across frames.
* temporal factor: a first-order Gaussian random walk, h_1 ~ N(0, I) and
  h_i ~ N(h_{i-1}, sigma2_t * I).

This module provides samplers, exact log-densities, and Monte-Carlo
estimators of cross-entropies / KL divergences. The MC estimators are too
noisy to train with, but they are the independent oracle the closed-form
loss terms in :mod:`fsvae.losses` are verified against.

All randomness is counter-based (Philox keyed by a 64-bit seed plus stream
indices), so sampling is reproducible regardless of call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

PRIOR_VARIANTS = ("factored", "slow", "standard-normal")


@dataclass(frozen=True)
class PriorConfig:
    """Hyper-parameters of the factored sequence prior.

    sigma2_s: within-video variance of the static factor around its anchor.
    sigma2_t: step variance of the temporal random walk.
    f_s, f_t: feature widths of the static and temporal factors.
    n_frames: sequence length N.
    """

    sigma2_s: float = 0.01
    sigma2_t: float = 0.01
    f_s: int = 2
    f_t: int = 2
    n_frames: int = 16

    def __post_init__(self):
        if not (self.sigma2_s > 0 and math.isfinite(self.sigma2_s)):
            raise ValueError(f"sigma2_s must be positive, got {self.sigma2_s}")
        if not (self.sigma2_t > 0 and math.isfinite(self.sigma2_t)):
            raise ValueError(f"sigma2_t must be positive, got {self.sigma2_t}")
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.f_s < 0 or self.f_t < 0 or self.f_s + self.f_t < 1:
            raise ValueError(f"invalid factor widths f_s={self.f_s}, f_t={self.f_t}")

    @property
    def f_total(self) -> int:
        return self.f_s + self.f_t


@dataclass(frozen=True)
class StaticPriorConstant:
    """Log of the per-feature normalizing constant of the static prior pdf."""

    log_c: float
    n_frames: int
    sigma2_s: float

    @classmethod
    def for_config(cls, n_frames: int, sigma2_s: float) -> "StaticPriorConstant":
        return cls(static_log_norm_const(n_frames, sigma2_s), n_frames, sigma2_s)


def static_log_norm_const(n_frames: int, sigma2_s: float) -> float:
    """log C for the anchor-marginalized static prior, per feature.

    Computed fully in log space; the literal constant mixes factors like
    sigma2_s**(-N/2) that overflow/underflow quickly. The last factor
    normalizes the Gaussian of the frame-mean, whose variance is
    1 + sigma2_s/N (anchor variance plus averaged noise).
    """
    n, s = n_frames, sigma2_s
    return (
        -0.5 * (n - 1) * LOG_2PI
        + 0.5 * (math.log(s / n) - n * math.log(s))
        - 0.5 * math.log(2.0 * math.pi * (s / n + 1.0))
    )


def _rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.Philox(ss))


def sample_static_prior(cfg: PriorConfig, seed: int, n_videos: int | None = None) -> np.ndarray:
    """Draw static-factor sequences; shape [N, f_s] or [n_videos, N, f_s].

    The per-video anchor is drawn explicitly and discarded; the returned
    frames are conditionally independent around it.
    """
    b = 1 if n_videos is None else int(n_videos)
    rng = _rng(seed, 0)
    anchor = rng.standard_normal((b, 1, cfg.f_s))
    noise = rng.standard_normal((b, cfg.n_frames, cfg.f_s))
    h = anchor + math.sqrt(cfg.sigma2_s) * noise
    return h[0] if n_videos is None else h


def sample_temporal_prior(cfg: PriorConfig, seed: int, n_videos: int | None = None) -> np.ndarray:
    """Draw temporal-factor random walks; shape [N, f_t] or [n_videos, N, f_t]."""
    b = 1 if n_videos is None else int(n_videos)
    rng = _rng(seed, 1)
    steps = rng.standard_normal((b, cfg.n_frames, cfg.f_t))
    scale = np.full(cfg.n_frames, math.sqrt(cfg.sigma2_t))
    scale[0] = 1.0  # first frame is the standard-normal chain root
    h = np.cumsum(steps * scale[None, :, None], axis=1)
    return h[0] if n_videos is None else h


def _check_seq(h: np.ndarray, cfg: PriorConfig, width: int, what: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim < 2 or h.shape[-2] != cfg.n_frames or h.shape[-1] != width:
        raise ValueError(
            f"{what} expects trailing shape [{cfg.n_frames}, {width}], got {h.shape}"
        )
    return h


def _random_walk_logpdf(h: np.ndarray, sigma2: float) -> np.ndarray:
    """Random-walk log-density over the trailing [N, F] axes of h."""
    first = -0.5 * (LOG_2PI + h[..., 0, :] ** 2).sum(axis=-1)
    if h.shape[-2] == 1:
        return first
    d = np.diff(h, axis=-2)
    steps = -0.5 * (math.log(2.0 * math.pi * sigma2) + d**2 / sigma2).sum(axis=(-2, -1))
    return first + steps


def _clustered_logpdf(h: np.ndarray, sigma2_s: float) -> np.ndarray:
    """Anchor-marginalized static log-density over the trailing [N, F] axes."""
    n = h.shape[-2]
    f = h.shape[-1]
    mean_sq = np.mean(h**2, axis=-2)
    mean = np.mean(h, axis=-2)
    quad = (mean_sq - mean**2) / (sigma2_s / n) + mean**2 / (sigma2_s / n + 1.0)
    return f * static_log_norm_const(n, sigma2_s) - 0.5 * quad.sum(axis=-1)


def _standard_normal_logpdf(h: np.ndarray) -> np.ndarray:
    return -0.5 * (LOG_2PI + h**2).sum(axis=(-2, -1))


def log_pdf_temporal(h: np.ndarray, cfg: PriorConfig) -> float | np.ndarray:
    """Exact log p(h) for the temporal factor; h has trailing shape [N, f_t]."""
    h = _check_seq(h, cfg, cfg.f_t, "log_pdf_temporal")
    out = _random_walk_logpdf(h, cfg.sigma2_t)
    return float(out) if out.ndim == 0 else out


def log_pdf_static(h: np.ndarray, cfg: PriorConfig) -> float | np.ndarray:
    """Exact log p(h) for the static factor; h has trailing shape [N, f_s]."""
    h = _check_seq(h, cfg, cfg.f_s, "log_pdf_static")
    out = _clustered_logpdf(h, cfg.sigma2_s)
    return float(out) if out.ndim == 0 else out


def _check_posterior(mu, log_var):
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape or mu.ndim not in (2, 3):
        raise ValueError(f"posterior arrays must both be [N, F] or [B, N, F], got {mu.shape} / {log_var.shape}")
    if not (np.isfinite(mu).all() and np.isfinite(log_var).all()):
        raise ValueError("posterior parameters must be finite")
    if mu.ndim == 2:
        mu, log_var = mu[None], log_var[None]
    return mu, log_var


def _variant_logpdf(h: np.ndarray, cfg: PriorConfig, variant: str) -> np.ndarray:
    if variant == "factored":
        if h.shape[-1] != cfg.f_total:
            raise ValueError(f"factored variant expects width {cfg.f_total}, got {h.shape[-1]}")
        parts = []
        if cfg.f_s > 0:
            parts.append(_clustered_logpdf(h[..., : cfg.f_s], cfg.sigma2_s))
        if cfg.f_t > 0:
            parts.append(_random_walk_logpdf(h[..., cfg.f_s :], cfg.sigma2_t))
        return sum(parts)
    if variant == "slow":
        return _random_walk_logpdf(h, cfg.sigma2_t)
    if variant == "standard-normal":
        return _standard_normal_logpdf(h)
    raise ValueError(f"unknown prior variant {variant!r}; expected one of {PRIOR_VARIANTS}")


def mc_kl_estimate(
    mu: np.ndarray,
    log_var: np.ndarray,
    cfg: PriorConfig,
    variant: str,
    n_samples: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(q || p_variant), with its standard error.

    Samples h ~ q and averages log q(h) - log p(h). High variance makes
    this unusable as a training loss, but it is an unbiased oracle for the
    analytic KL terms. With a batched posterior [B, N, F] the per-sample
    values are averaged over the batch first, matching the per-video batch
    means the analytic terms report.
    """
    if variant not in PRIOR_VARIANTS:
        raise ValueError(f"unknown prior variant {variant!r}; expected one of {PRIOR_VARIANTS}")
    if n_samples < 1000:
        raise ValueError(f"n_samples must be >= 1000 for a usable estimate, got {n_samples}")
    mu, log_var = _check_posterior(mu, log_var)
    if mu.shape[1] != cfg.n_frames:
        raise ValueError(f"posterior has {mu.shape[1]} frames, config expects {cfg.n_frames}")
    sigma = np.exp(0.5 * log_var)

    rng = _rng(seed, 2)
    diffs = np.empty(n_samples)
    chunk = 20_000
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        eps = rng.standard_normal((c,) + mu.shape)
        h = mu + sigma * eps
        log_q = -0.5 * (LOG_2PI + log_var + eps**2).sum(axis=(-2, -1))
        log_p = _variant_logpdf(h, cfg, variant)
        diffs[done : done + c] = (log_q - log_p).mean(axis=-1)
        done += c
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n_samples))


def mc_log_prior_estimate(
    mu: np.ndarray,
    log_var: np.ndarray,
    cfg: PriorConfig,
    density: str,
    n_samples: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo estimate of E_q[log p(h)] for one prior density.

    density is one of "static", "random-walk", "standard-normal"; the
    posterior arrays should already be sliced to the factor of interest.
    """
    if n_samples < 1000:
        raise ValueError(f"n_samples must be >= 1000 for a usable estimate, got {n_samples}")
    mu, log_var = _check_posterior(mu, log_var)
    sigma = np.exp(0.5 * log_var)
    if density == "static":
        logpdf = lambda h: _clustered_logpdf(h, cfg.sigma2_s)
    elif density == "random-walk":
        logpdf = lambda h: _random_walk_logpdf(h, cfg.sigma2_t)
    elif density == "standard-normal":
        logpdf = _standard_normal_logpdf
    else:
        raise ValueError(f"unknown density {density!r}")

    rng = _rng(seed, 3)
    vals = np.empty(n_samples)
    chunk = 20_000
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        eps = rng.standard_normal((c,) + mu.shape)
        vals[done : done + c] = logpdf(mu + sigma * eps).mean(axis=-1)
        done += c
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))
