"""Self-check suite: every analytic shortcut against an independent route.

Checks:
  * analytic KL terms vs Monte-Carlo estimates from the prior samplers
  * exact prior densities vs quadrature (N<=2, one feature)
  * autograd gradients vs central finite differences, for the loss terms
    and for each network layer kind
  * exact collapse identities between the KL variants

Each check reports a measured deviation against its tolerance; the suite
is wired into the CLI (`fsvae verify`) and exits nonzero on any failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.integrate import simpson

from fsvae import losses, priors
from fsvae.losses import PosteriorParams
from fsvae.networks import BatchNorm, Decoder, Encoder, NetPreset, truncated_normal_
from fsvae.priors import PriorConfig

LOG_2PI = priors.LOG_2PI


@dataclass
class CheckResult:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def render(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: deviation={self.deviation:.3e} tolerance={self.tolerance:.3e}"


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        lines = [c.render() for c in self.checks]
        n_fail = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks) - n_fail}/{len(self.checks)} checks passed")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def fd_gradients(fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor], step: float = 1e-5):
    """Central-difference gradients of a scalar fn w.r.t. each tensor entry."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gf = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
                gf[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g)
    return grads


def autograd_gradients(fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor]):
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    for t in tensors:
        t.requires_grad_(False)
        t.grad = None
    return grads


def max_rel_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-4) -> float:
    """Max |a-b| / max(|a|,|b|,floor); the floor keeps near-zero entries sane."""
    num = (a - b).abs()
    den = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float((num / den).max()) if a.numel() else 0.0


def gradient_check(fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor], step: float = 1e-5) -> float:
    auto = autograd_gradients(fn, tensors)
    numeric = fd_gradients(fn, tensors, step)
    return max(max_rel_error(a, n) for a, n in zip(auto, numeric))


def sampled_gradient_check(
    fn: Callable[[], torch.Tensor],
    tensors: list[torch.Tensor],
    n_entries: int,
    seed: int,
    step: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Gradient check on a random subset of entries of large tensors.

    The floor turns the comparison absolute for near-zero gradients, where
    central differences only resolve down to the forward pass's rounding
    noise.
    """
    auto = autograd_gradients(fn, tensors)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    worst = 0.0
    sizes = np.array([t.numel() for t in tensors])
    for _ in range(n_entries):
        ti = int(rng.integers(0, len(tensors)))
        ei = int(rng.integers(0, sizes[ti]))
        flat = tensors[ti].view(-1)
        with torch.no_grad():
            orig = float(flat[ei])
            flat[ei] = orig + step
            f_plus = float(fn())
            flat[ei] = orig - step
            f_minus = float(fn())
            flat[ei] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(auto[ti].view(-1)[ei])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


# ---------------------------------------------------------------------------
# Random posteriors


def random_posterior(rng: np.random.Generator, b: int, n: int, f: int) -> PosteriorParams:
    mu = rng.standard_normal((b, n, f))
    log_var = rng.uniform(-3.0, 0.5, size=(b, n, f))
    return PosteriorParams(torch.tensor(mu), torch.tensor(log_var))


def _analytic_kl(post: PosteriorParams, cfg: PriorConfig, variant: str, static_ce_fn) -> float:
    if variant == "factored":
        val = (
            losses.entropy_term(post)
            - static_ce_fn(post.static_slice(cfg.f_s), cfg)
            - losses.temporal_cross_entropy(post.temporal_slice(cfg.f_s), cfg)
        )
    elif variant == "slow":
        val = losses.kl_slow(post, cfg)
    else:
        val = losses.kl_standard_normal(post)
    return float(val)


# ---------------------------------------------------------------------------
# Individual checks


def check_mc_agreement(seed: int, overrides: dict | None = None, n_posteriors: int = 6, n_samples: int = 50_000):
    """|analytic - MC| within 4 standard errors, per variant."""
    static_ce_fn = (overrides or {}).get("static_cross_entropy", losses.static_cross_entropy)
    cfg = PriorConfig(f_s=2, f_t=2, n_frames=8)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    results = []
    for variant in ("factored", "slow", "standard-normal"):
        worst = 0.0
        for k in range(n_posteriors):
            post = random_posterior(rng, 1, cfg.n_frames, cfg.f_total)
            analytic = _analytic_kl(post, cfg, "vae" if variant == "standard-normal" else variant, static_ce_fn)
            mc, se = priors.mc_kl_estimate(
                post.mu.numpy()[0], post.log_var.numpy()[0], cfg, variant, n_samples, seed + 91 * k
            )
            worst = max(worst, abs(analytic - mc) / (4.0 * se))
        results.append(CheckResult(f"mc-vs-analytic-kl/{variant}", worst, 1.0))
    return results


def check_static_normalization():
    """Exact density checks for the anchor-marginalized static prior."""
    results = []
    # N=1 collapses to Normal(0, 1 + sigma2_s), pointwise
    cfg1 = PriorConfig(f_s=1, f_t=1, n_frames=1)
    xs = np.linspace(-6.0, 6.0, 101)
    var = 1.0 + cfg1.sigma2_s
    expected = -0.5 * (np.log(2.0 * np.pi * var) + xs**2 / var)
    got = priors.log_pdf_static(xs[:, None, None], cfg1)
    results.append(CheckResult("static-prior-n1-pointwise", float(np.abs(got - expected).max()), 1e-10))
    # N=2 integrates to 1 over [-8, 8]^2
    cfg2 = PriorConfig(f_s=1, f_t=1, n_frames=2)
    grid = np.linspace(-8.0, 8.0, 641)
    h1, h2 = np.meshgrid(grid, grid, indexing="ij")
    h = np.stack([h1, h2], axis=-1)[..., None]  # [G, G, 2, 1]
    dens = np.exp(priors.log_pdf_static(h, cfg2))
    integral = simpson(simpson(dens, x=grid, axis=1), x=grid, axis=0)
    results.append(CheckResult("static-prior-n2-quadrature", abs(float(integral) - 1.0), 1e-3))
    # temporal density normalizes too
    dens_t = np.exp(priors.log_pdf_temporal(h, cfg2))
    integral_t = simpson(simpson(dens_t, x=grid, axis=1), x=grid, axis=0)
    results.append(CheckResult("temporal-prior-n2-quadrature", abs(float(integral_t) - 1.0), 1e-3))
    return results


def check_loss_gradients(seed: int):
    """FD gradient checks of every loss term w.r.t. mu and log-variance."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    cfg = PriorConfig(f_s=2, f_t=2, n_frames=4)
    post = random_posterior(rng, 2, cfg.n_frames, cfg.f_total)
    tensors = [post.mu, post.log_var]
    results = []
    for name, fn in (
        ("kl-factored", lambda: losses.kl_factored(post, cfg)),
        ("kl-slow", lambda: losses.kl_slow(post, cfg)),
        ("kl-standard-normal", lambda: losses.kl_standard_normal(post)),
    ):
        results.append(CheckResult(f"grad/{name}", gradient_check(fn, tensors), 1e-5))
    raw = torch.tensor(rng.uniform(-1.5, 1.5, size=(2, 3, 6, 6)))
    frames = torch.tensor(rng.integers(0, 2, size=(2, 3, 6, 6)).astype(np.float64))
    results.append(
        CheckResult(
            "grad/bernoulli-recon",
            gradient_check(lambda: losses.bernoulli_recon_loglik(torch.sigmoid(raw), frames), [raw]),
            1e-5,
        )
    )
    return results


def _micro_model(seed: int):
    preset = NetPreset("micro", (2, 2, 2, 2, 2, 2, 2, 2), 8)
    gen = torch.Generator().manual_seed(seed)
    enc = Encoder(preset, 4, gen).double()
    dec = Decoder(preset, 4, gen).double()
    return enc, dec


def check_network_gradients(seed: int):
    """FD checks per layer kind plus sampled end-to-end encoder/decoder checks."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    results = []

    conv1 = torch.nn.Conv2d(2, 3, 3, stride=1, padding=1).double()
    conv2 = torch.nn.Conv2d(2, 3, 3, stride=2, padding=1).double()
    tconv1 = torch.nn.ConvTranspose2d(2, 3, 3, stride=1, padding=1).double()
    tconv2 = torch.nn.ConvTranspose2d(2, 3, 3, stride=2, padding=1, output_padding=1).double()
    linear = torch.nn.Linear(5, 4).double()
    for layer in (conv1, conv2, tconv1, tconv2, linear):
        truncated_normal_(layer.weight, 0.3, gen)
        truncated_normal_(layer.bias, 0.3, gen)

    x_img = torch.empty(2, 2, 6, 6, dtype=torch.float64).normal_(generator=gen)
    x_vec = torch.empty(3, 5, dtype=torch.float64).normal_(generator=gen)
    cases = [
        ("conv-s1", conv1, x_img),
        ("conv-s2", conv2, x_img),
        ("tconv-s1", tconv1, x_img),
        ("tconv-s2", tconv2, x_img),
        ("linear", linear, x_vec),
    ]
    for name, layer, x in cases:
        tensors = [layer.weight, layer.bias, x]
        # weigh the output so the scalar is sensitive to every entry
        with torch.no_grad():
            w_out = torch.empty_like(layer(x)).normal_(generator=gen)
        fn = lambda layer=layer, x=x, w_out=w_out: (layer(x) * w_out).sum()
        results.append(CheckResult(f"grad/{name}", gradient_check(fn, tensors), 1e-5))

    bn = BatchNorm(3).double()
    x_bn = torch.empty(4, 3, 5, 5, dtype=torch.float64).normal_(generator=gen)
    w_out = torch.empty_like(x_bn).normal_(generator=gen)
    for mode in ("train", "infer"):
        bn.train(mode == "train")
        fn = lambda: (bn(x_bn) * w_out).sum()
        results.append(
            CheckResult(f"grad/batchnorm-{mode}", gradient_check(fn, [bn.weight, bn.bias, x_bn]), 1e-5)
        )

    enc, dec = _micro_model(seed)
    enc.train()
    dec.train()
    frames = torch.empty(2, 1, 64, 64, dtype=torch.float64).uniform_(generator=gen)
    enc_params = list(enc.parameters())

    def enc_loss():
        mu, log_var = enc(frames)
        return (mu**2).sum() + (0.3 * log_var).sum()

    results.append(
        CheckResult("grad/encoder-end-to-end", sampled_gradient_check(enc_loss, enc_params, 24, seed), 1e-5)
    )

    h = torch.empty(2, 4, dtype=torch.float64).normal_(generator=gen)
    dec_params = list(dec.parameters()) + [h]
    # mean-zero weighting keeps |f| small, so FD roundoff stays below tolerance
    w_dec = torch.empty(2, 64, 64, dtype=torch.float64).normal_(generator=gen)

    def dec_loss():
        return (torch.sigmoid(dec(h)) * w_dec).sum()

    results.append(
        CheckResult("grad/decoder-end-to-end", sampled_gradient_check(dec_loss, dec_params, 24, seed + 1), 1e-5)
    )
    return results


def check_collapse_identities(seed: int):
    """Exact identities between the KL variants and the entropy term."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    results = []

    cfg = PriorConfig(f_s=2, f_t=2, n_frames=8)
    post = random_posterior(rng, 3, cfg.n_frames, cfg.f_total)
    slow_as_factored = PriorConfig(
        sigma2_s=cfg.sigma2_s, sigma2_t=cfg.sigma2_t, f_s=0, f_t=cfg.f_total, n_frames=cfg.n_frames
    )
    dev = abs(float(losses.kl_slow(post, cfg)) - float(losses.kl_factored(post, slow_as_factored)))
    results.append(CheckResult("identity/kl-slow-is-factored-fs0", dev, 1e-12))

    cfg1 = PriorConfig(f_s=2, f_t=2, n_frames=1)
    post1 = random_posterior(rng, 3, 1, 4)
    dev = abs(float(losses.kl_slow(post1, cfg1)) - float(losses.kl_standard_normal(post1)))
    results.append(CheckResult("identity/kl-n1-is-standard-normal", dev, 1e-12))

    whole = float(losses.entropy_term(post))
    split = float(losses.entropy_term(post.static_slice(2))) + float(losses.entropy_term(post.temporal_slice(2)))
    results.append(CheckResult("identity/entropy-additive", abs(whole - split), 1e-10))

    unit = PosteriorParams(torch.zeros(1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
    expected = -0.5 * LOG_2PI - 0.5
    results.append(
        CheckResult("identity/entropy-unit-gaussian", abs(float(losses.entropy_term(unit)) - expected), 1e-12)
    )
    return results


def run_verify(seed: int = 0, overrides: dict | None = None) -> VerifyReport:
    """Run the full property suite; overrides swap implementations under test."""
    checks: list[CheckResult] = []
    checks += check_mc_agreement(seed, overrides)
    checks += check_static_normalization()
    checks += check_loss_gradients(seed)
    checks += check_network_gradients(seed)
    checks += check_collapse_identities(seed)
    return VerifyReport(checks)
