"""Analytic ELBO terms against closed forms and the Monte-Carlo oracles."""

import math

import numpy as np
import pytest
import torch

from fsvae.losses import (
    ElboTerms,
    PosteriorParams,
    bernoulli_recon_loglik,
    elbo,
    entropy_term,
    kl_factored,
    kl_slow,
    kl_standard_normal,
    static_cross_entropy,
    temporal_cross_entropy,
)
from fsvae.priors import PriorConfig, mc_kl_estimate, mc_log_prior_estimate

LOG_2PI = math.log(2.0 * math.pi)


def random_posterior(seed, b, n, f, scale=1.0):
    rng = np.random.default_rng(seed)
    mu = scale * rng.standard_normal((b, n, f))
    log_var = rng.uniform(-3.0, 0.5, (b, n, f))
    return PosteriorParams(torch.tensor(mu), torch.tensor(log_var))


class TestEntropyTerm:
    def test_unit_gaussian_point_value(self):
        post = PosteriorParams(torch.zeros(1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
        assert float(entropy_term(post)) == pytest.approx(-0.5 * LOG_2PI - 0.5, abs=1e-15)

    def test_matches_per_frame_closed_form(self):
        post = random_posterior(0, 3, 5, 4)
        lv = post.log_var.numpy()
        expected = np.mean([-0.5 * np.sum(LOG_2PI + 1.0 + lv[b]) for b in range(3)])
        assert float(entropy_term(post)) == pytest.approx(expected, abs=1e-10)

    def test_independent_of_mu(self):
        post = random_posterior(1, 2, 4, 3)
        shifted = PosteriorParams(post.mu + 17.0, post.log_var)
        assert float(entropy_term(post)) == float(entropy_term(shifted))

    def test_additive_across_feature_split(self):
        post = random_posterior(2, 4, 6, 5)
        whole = float(entropy_term(post))
        parts = float(entropy_term(post.static_slice(2))) + float(entropy_term(post.temporal_slice(2)))
        assert whole == pytest.approx(parts, abs=1e-10)


class TestTemporalCrossEntropy:
    def test_single_frame_unit_posterior(self):
        cfg = PriorConfig(f_s=1, f_t=1, n_frames=1)
        post = PosteriorParams(torch.zeros(1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
        assert float(temporal_cross_entropy(post, cfg)) == pytest.approx(-0.5 * LOG_2PI - 0.5, abs=1e-15)

    def test_matches_mc_oracle(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=16)
        post = random_posterior(3, 1, 16, 2)
        analytic = float(temporal_cross_entropy(post, cfg))
        mc, se = mc_log_prior_estimate(
            post.mu.numpy()[0], post.log_var.numpy()[0], cfg, "random-walk", 200_000, seed=4
        )
        assert abs(analytic - mc) < 4 * se

    def test_mean_shift_changes_only_first_frame_term(self):
        cfg = PriorConfig(f_s=1, f_t=3, n_frames=6)
        post = random_posterior(5, 2, 6, 3)
        shifted = PosteriorParams(post.mu + 2.5, post.log_var)

        def first_frame_term(p):
            v = p.log_var.exp()
            return float((-0.5 * (p.width * LOG_2PI + (p.mu[:, 0] ** 2 + v[:, 0]).sum(-1))).mean())

        delta_total = float(temporal_cross_entropy(shifted, cfg)) - float(temporal_cross_entropy(post, cfg))
        delta_first = first_frame_term(shifted) - first_frame_term(post)
        assert delta_total == pytest.approx(delta_first, abs=1e-12)


class TestStaticCrossEntropy:
    def test_single_frame_closed_form(self):
        # cross-entropy of N(0,1) against the N(0, 1+sigma2_s) marginal
        cfg = PriorConfig(f_s=1, f_t=1, n_frames=1)
        post = PosteriorParams(torch.zeros(1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
        var = 1.0 + cfg.sigma2_s
        expected = -0.5 * math.log(2.0 * math.pi * var) - 0.5 / var
        assert float(static_cross_entropy(post, cfg)) == pytest.approx(expected, abs=1e-12)

    def test_matches_mc_oracle(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=16)
        post = random_posterior(6, 1, 16, 2)
        analytic = float(static_cross_entropy(post, cfg))
        mc, se = mc_log_prior_estimate(
            post.mu.numpy()[0], post.log_var.numpy()[0], cfg, "static", 200_000, seed=7
        )
        assert abs(analytic - mc) < 4 * se

    def test_frame_permutation_invariance(self):
        cfg = PriorConfig(f_s=3, f_t=1, n_frames=8)
        post = random_posterior(8, 2, 8, 3)
        perm = np.random.default_rng(9).permutation(8)
        shuffled = PosteriorParams(post.mu[:, perm], post.log_var[:, perm])
        assert float(static_cross_entropy(shuffled, cfg)) == pytest.approx(
            float(static_cross_entropy(post, cfg)), rel=1e-12
        )


class TestKlFactored:
    def test_nonnegative_over_many_posteriors(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=16)
        rng = np.random.default_rng(10)
        worst = np.inf
        for _ in range(10_000):
            mu = 2.0 * rng.standard_normal((1, 16, 4))
            log_var = rng.uniform(-4.0, 1.0, (1, 16, 4))
            post = PosteriorParams(torch.tensor(mu), torch.tensor(log_var))
            worst = min(worst, float(kl_factored(post, cfg)))
        assert worst >= -1e-9

    def test_matches_mc_oracle(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=16)
        post = random_posterior(11, 1, 16, 4)
        analytic = float(kl_factored(post, cfg))
        mc, se = mc_kl_estimate(post.mu.numpy()[0], post.log_var.numpy()[0], cfg, "factored", 200_000, seed=12)
        assert abs(analytic - mc) < 4 * se

    def test_empty_factor_collapse(self):
        post = random_posterior(13, 2, 8, 4)
        only_static = PriorConfig(f_s=4, f_t=0, n_frames=8)
        expected = float(entropy_term(post)) - float(static_cross_entropy(post, only_static))
        assert float(kl_factored(post, only_static)) == pytest.approx(expected, abs=1e-12)
        only_temporal = PriorConfig(f_s=0, f_t=4, n_frames=8)
        expected = float(entropy_term(post)) - float(temporal_cross_entropy(post, only_temporal))
        assert float(kl_factored(post, only_temporal)) == pytest.approx(expected, abs=1e-12)

    def test_width_mismatch_raises(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=4)
        with pytest.raises(ValueError):
            kl_factored(random_posterior(14, 1, 4, 3), cfg)


class TestKlStandardNormal:
    def test_zero_at_prior(self):
        post = PosteriorParams(torch.zeros(2, 3, 4), torch.zeros(2, 3, 4))
        assert float(kl_standard_normal(post)) == 0.0

    def test_unit_mean_scalar(self):
        post = PosteriorParams(torch.ones(1, 1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
        assert float(kl_standard_normal(post)) == pytest.approx(0.5, abs=1e-15)

    def test_doubled_variance_scalar(self):
        post = PosteriorParams(
            torch.zeros(1, 1, 1, dtype=torch.float64),
            torch.full((1, 1, 1), math.log(2.0), dtype=torch.float64),
        )
        assert float(kl_standard_normal(post)) == pytest.approx(0.5 * (1.0 - math.log(2.0)), abs=1e-15)

    def test_video_sum_equals_frame_mean_times_frames(self):
        # per-video normalization: a [B,N,F] batch scores N times the
        # per-frame mean of the same frames flattened to [B*N,1,F]
        post = random_posterior(15, 4, 6, 3)
        flat = PosteriorParams(post.mu.reshape(24, 1, 3), post.log_var.reshape(24, 1, 3))
        assert float(kl_standard_normal(post)) == pytest.approx(6 * float(kl_standard_normal(flat)), rel=1e-10)


class TestKlSlow:
    def test_equals_factored_with_zero_static_width(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=8)
        post = random_posterior(16, 3, 8, 4)
        as_temporal = PriorConfig(sigma2_t=cfg.sigma2_t, f_s=0, f_t=4, n_frames=8)
        assert float(kl_slow(post, cfg)) == pytest.approx(float(kl_factored(post, as_temporal)), abs=1e-12)

    def test_single_frame_equals_standard_normal_kl(self):
        cfg = PriorConfig(f_s=1, f_t=1, n_frames=1)
        post = random_posterior(17, 3, 1, 4)
        assert float(kl_slow(post, cfg)) == pytest.approx(float(kl_standard_normal(post)), abs=1e-12)

    def test_matches_mc_oracle(self):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=16)
        post = random_posterior(18, 1, 16, 4)
        analytic = float(kl_slow(post, cfg))
        mc, se = mc_kl_estimate(post.mu.numpy()[0], post.log_var.numpy()[0], cfg, "slow", 200_000, seed=19)
        assert abs(analytic - mc) < 4 * se


class TestBernoulliReconLoglik:
    def test_perfect_dark_reconstruction(self):
        frames = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        probs = torch.full((1, 2, 4, 4), 1e-6, dtype=torch.float64)
        expected = 2 * 16 * math.log(1.0 - 1e-6)
        assert float(bernoulli_recon_loglik(probs, frames)) == pytest.approx(expected, rel=1e-12)

    def test_constant_half_predictor(self):
        frames = torch.ones(1, 3, 4, 4, dtype=torch.float64)
        probs = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
        assert float(bernoulli_recon_loglik(probs, frames)) == pytest.approx(3 * 16 * math.log(0.5), rel=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(20)
        frames = rng.integers(0, 2, size=(2, 2, 3, 3)).astype(np.float64)
        probs = rng.uniform(0.05, 0.95, size=(2, 2, 3, 3))
        expected = 0.0
        for b in range(2):
            for i in range(2):
                for r in range(3):
                    for c in range(3):
                        p, x = probs[b, i, r, c], frames[b, i, r, c]
                        expected += x * math.log(p) + (1 - x) * math.log(1 - p)
        expected /= 2
        got = float(bernoulli_recon_loglik(torch.tensor(probs), torch.tensor(frames)))
        assert got == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            bernoulli_recon_loglik(torch.rand(1, 2, 4, 4), torch.rand(1, 2, 4, 5))


class TestElbo:
    def _setup(self, variant, seed=21):
        cfg = PriorConfig(f_s=2, f_t=2, n_frames=4)
        post = random_posterior(seed, 2, 4, 4)
        rng = np.random.default_rng(seed + 1)
        frames = torch.tensor(rng.integers(0, 2, size=(2, 4, 8, 8)).astype(np.float64))
        probs = torch.tensor(rng.uniform(0.1, 0.9, size=(2, 4, 8, 8)))
        return cfg, post, probs, frames

    @pytest.mark.parametrize("variant", ["factored", "slow", "vae"])
    def test_beta_linearity(self, variant):
        cfg, post, probs, frames = self._setup(variant)
        t1 = elbo(post, probs, frames, 1.0, cfg, variant)
        t2 = elbo(post, probs, frames, 2.0, cfg, variant)
        assert float(t2.elbo_value) - float(t1.elbo_value) == pytest.approx(-float(t1.kl), abs=1e-10)

    @pytest.mark.parametrize("variant", ["factored", "slow", "vae"])
    @pytest.mark.parametrize("beta", [0.5, 1.0, 4.0])
    def test_elbo_never_exceeds_reconstruction(self, variant, beta):
        cfg, post, probs, frames = self._setup(variant)
        terms = elbo(post, probs, frames, beta, cfg, variant)
        assert float(terms.kl) >= 0.0
        assert float(terms.elbo_value) <= float(terms.recon_loglik)

    def test_factored_terms_decompose(self):
        cfg, post, probs, frames = self._setup("factored")
        terms = elbo(post, probs, frames, 2.0, cfg, "factored")
        assert float(terms.kl) == pytest.approx(
            float(terms.entropy) - float(terms.static_ce) - float(terms.temporal_ce), abs=1e-12
        )
        assert float(terms.elbo_value) == pytest.approx(
            float(terms.recon_loglik) - 2.0 * float(terms.kl), rel=1e-12
        )
        assert isinstance(terms, ElboTerms)

    def test_benchmark_variants_zero_unused_terms(self):
        cfg, post, probs, frames = self._setup("slow")
        slow_terms = elbo(post, probs, frames, 1.0, cfg, "slow")
        assert float(slow_terms.static_ce) == 0.0
        vae_terms = elbo(post, probs, frames, 1.0, cfg, "vae")
        assert float(vae_terms.entropy) == 0.0
        assert float(vae_terms.kl) == pytest.approx(float(kl_standard_normal(post)), rel=1e-12)

    def test_rejects_bad_arguments(self):
        cfg, post, probs, frames = self._setup("factored")
        with pytest.raises(ValueError):
            elbo(post, probs, frames, 0.0, cfg, "factored")
        with pytest.raises(ValueError):
            elbo(post, probs, frames, 1.0, cfg, "boosted")


class TestGradients:
    def test_loss_terms_match_finite_differences(self):
        from fsvae.verify import gradient_check

        cfg = PriorConfig(f_s=1, f_t=2, n_frames=3)
        post = random_posterior(22, 2, 3, 3)
        worst = max(
            gradient_check(lambda: kl_factored(post, cfg), [post.mu, post.log_var]),
            gradient_check(lambda: kl_slow(post, cfg), [post.mu, post.log_var]),
            gradient_check(lambda: kl_standard_normal(post), [post.mu, post.log_var]),
        )
        assert worst <= 1e-5
