"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with `pytest -s`). Criteria
6, 7, and 9 share twelve desk-scale training runs (factored/slow/vae at
beta=4 and factored at beta=1, three seeds each) built by a session
fixture; expect the full module to take roughly an hour of CPU time.

Setting FSVAE_ACCEPTANCE_CACHE to a directory caches those trained runs
across invocations, for iterating on the cheap criteria; unset it for a
clean-room run.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from fsvae import losses
from fsvae.datasets import (
    BounceConfig,
    BouncingDigits,
    parse_idx,
    read_shards,
    serialize_idx,
    write_shards,
)
from fsvae.evaluation import (
    disentanglement_score,
    frame_table,
    noise_features,
    oracle_features,
    transfer_accuracy,
)
from fsvae.figures import emit_pgm_grid, interpolate_latents, sample_latents
from fsvae.networks import decode_frames, encode_features
from fsvae.priors import PriorConfig, mc_kl_estimate
from fsvae.training import TrainConfig, train
from fsvae.verify import (
    check_collapse_identities,
    check_loss_gradients,
    check_network_gradients,
    check_static_normalization,
    random_posterior,
)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
DESK_PRIOR = PriorConfig(f_s=2, f_t=2, n_frames=16)
DESK_CLASSES = (0, 1, 2)
DESK_ITERATIONS = 3000
DESK_BATCH_VIDEOS = 4
EVAL_VIDEOS = 800


def report(criterion: int, passed: bool, detail: str) -> None:
    tag = "PASS" if passed else "FAIL"
    print(f"[criterion {criterion}] {tag}: {detail}")


# ---------------------------------------------------------------------------
# Criterion 1: analytic vs Monte-Carlo KL


def test_criterion_1_analytic_vs_mc_kl():
    cfg = PriorConfig(sigma2_s=0.01, sigma2_t=0.01, f_s=2, f_t=2, n_frames=16)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(100)))
    worst = {"factored": 0.0, "slow": 0.0, "standard-normal": 0.0}
    for k in range(50):
        post = random_posterior(rng, 1, cfg.n_frames, cfg.f_total)
        analytic = {
            "factored": float(losses.kl_factored(post, cfg)),
            "slow": float(losses.kl_slow(post, cfg)),
            "standard-normal": float(losses.kl_standard_normal(post)),
        }
        for variant, value in analytic.items():
            mc, se = mc_kl_estimate(
                post.mu.numpy()[0], post.log_var.numpy()[0], cfg, variant, 200_000, seed=1000 + 7 * k
            )
            worst[variant] = max(worst[variant], abs(value - mc) / (4.0 * se))
    passed = all(v <= 1.0 for v in worst.values())
    report(1, passed, f"max |analytic-mc|/(4*stderr) per variant: "
                      f"{ {k: round(v, 3) for k, v in worst.items()} }")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 2: static prior is an exact density


def test_criterion_2_static_prior_normalization():
    results = check_static_normalization()
    by_name = {c.name: c for c in results}
    quad = by_name["static-prior-n2-quadrature"]
    point = by_name["static-prior-n1-pointwise"]
    passed = quad.passed and point.passed
    report(2, passed, f"N=2 quadrature off by {quad.deviation:.2e} (tol 1e-3), "
                      f"N=1 pointwise off by {point.deviation:.2e} (tol 1e-10)")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 3: gradient checks


def test_criterion_3_gradient_checks():
    checks = check_loss_gradients(seed=11) + check_network_gradients(seed=12)
    worst = max(c.deviation for c in checks)
    passed = all(c.passed for c in checks)
    report(3, passed, f"{len(checks)} finite-difference checks, worst rel err {worst:.2e} (tol 1e-5)")
    assert passed, "\n".join(c.render() for c in checks if not c.passed)


# ---------------------------------------------------------------------------
# Criterion 4: exact collapse identities


def test_criterion_4_collapse_identities():
    checks = check_collapse_identities(seed=13)
    passed = all(c.passed for c in checks)
    worst = max(c.deviation for c in checks)
    report(4, passed, f"{len(checks)} identities, worst deviation {worst:.2e}")
    assert passed, "\n".join(c.render() for c in checks if not c.passed)


# ---------------------------------------------------------------------------
# Criterion 5: the metric separates a perfect encoder from a useless one


def test_criterion_5_oracle_dscore_separation():
    cfg = BounceConfig(n_frames=8, digit_classes=DESK_CLASSES, seed=50)
    stream = BouncingDigits.procedural(cfg, variants_per_class=20)
    batch = stream.batch(0, 600)

    feats, f_s = oracle_features(batch, cfg, seed=51)
    oracle = disentanglement_score(frame_table(batch, feats, cfg), f_s=f_s, mode="natural", seed=52)
    noise = disentanglement_score(
        frame_table(batch, noise_features(batch, width=4, seed=53), cfg), f_s=2, mode="natural", seed=54
    )
    passed = oracle.score >= 3.0 and 0.7 <= noise.score <= 1.4
    report(5, passed, f"oracle encoder {oracle.score:.2f} (>= 3), noise encoder {noise.score:.2f} (in [0.7, 1.4])")
    assert passed


# ---------------------------------------------------------------------------
# Desk-scale training runs shared by criteria 6, 7, 9


def _desk_stream(seed: int) -> BouncingDigits:
    bounce = BounceConfig(n_frames=DESK_PRIOR.n_frames, digit_classes=DESK_CLASSES, seed=seed)
    return BouncingDigits.procedural(bounce, variants_per_class=20)


def _desk_eval(model, seed: int, natural: bool) -> dict:
    bounce = BounceConfig(n_frames=DESK_PRIOR.n_frames, digit_classes=DESK_CLASSES, seed=seed + 7919)
    stream = BouncingDigits.procedural(bounce, variants_per_class=20)
    batch = stream.batch(0, EVAL_VIDEOS)
    feats = encode_features(model, batch.frames)
    table = frame_table(batch, feats, bounce)
    mode = "natural" if natural else "max"
    res = disentanglement_score(table, f_s=DESK_PRIOR.f_s, mode=mode, seed=seed)
    cols = tuple(range(DESK_PRIOR.f_s)) if natural else None
    acc = transfer_accuracy(table, cols=cols, seed=seed)
    return {"dscore": res.score, "accuracies": list(res.accuracies), "transfer": acc}


def _run_desk(variant: str, beta: float, seed: int) -> dict:
    cfg = TrainConfig(
        iterations=DESK_ITERATIONS,
        batch_videos=DESK_BATCH_VIDEOS,
        beta=beta,
        variant=variant,
        prior=DESK_PRIOR,
        net_preset="desk",
        seed=seed,
        log_every=500,
    )
    result = train(cfg, _desk_stream(seed))
    out = _desk_eval(result.model, seed, natural=variant == "factored")
    out["checkpoint"] = result.final_checkpoint
    return out


@pytest.fixture(scope="session")
def desk_runs():
    cache_dir = os.environ.get("FSVAE_ACCEPTANCE_CACHE")
    runs: dict[tuple, dict] = {}
    jobs = [(v, 4.0, s) for s in SEEDS for v in ("factored", "slow", "vae")]
    jobs += [("factored", 1.0, s) for s in SEEDS]
    for variant, beta, seed in jobs:
        key = (variant, beta, seed)
        stem = f"desk_{variant}_b{beta:g}_s{seed}"
        if cache_dir and (Path(cache_dir) / f"{stem}.json").exists():
            runs[key] = json.loads((Path(cache_dir) / f"{stem}.json").read_text())
            ck = Path(cache_dir) / f"{stem}.fsvae"
            runs[key]["checkpoint"] = ck.read_bytes() if ck.exists() else None
            continue
        out = _run_desk(variant, beta, seed)
        runs[key] = out
        if cache_dir:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            (Path(cache_dir) / f"{stem}.json").write_text(
                json.dumps({k: v for k, v in out.items() if k != "checkpoint"})
            )
            (Path(cache_dir) / f"{stem}.fsvae").write_bytes(out["checkpoint"])
    return runs


def _mean_dscore(runs, variant, beta):
    return float(np.mean([runs[(variant, beta, s)]["dscore"] for s in SEEDS]))


def test_criterion_6_desk_ordering(desk_runs):
    ds_f = _mean_dscore(desk_runs, "factored", 4.0)
    ds_s = _mean_dscore(desk_runs, "slow", 4.0)
    ds_v = _mean_dscore(desk_runs, "vae", 4.0)
    passed = (ds_f - ds_s >= 0.2) and (ds_s - ds_v >= 0.2)
    report(6, passed, f"mean d-scores at beta=4 over {len(SEEDS)} seeds: "
                      f"factored {ds_f:.2f} > slow {ds_s:.2f} > vae {ds_v:.2f} (gaps >= 0.2)")
    assert passed


def test_criterion_7_transfer_ordering(desk_runs):
    acc_f = float(np.mean([desk_runs[("factored", 4.0, s)]["transfer"] for s in SEEDS]))
    acc_s = float(np.mean([desk_runs[("slow", 4.0, s)]["transfer"] for s in SEEDS]))
    passed = acc_f - acc_s >= 0.05
    report(7, passed, f"static-factor transfer {acc_f:.3f} vs slow full-feature {acc_s:.3f} "
                      f"(gap {acc_f - acc_s:+.3f} >= 0.05)")
    assert passed


def test_criterion_9_beta_sensitivity(desk_runs):
    ds_b4 = _mean_dscore(desk_runs, "factored", 4.0)
    ds_b1 = _mean_dscore(desk_runs, "factored", 1.0)
    passed = ds_b4 >= ds_b1 - 0.1
    report(9, passed, f"factored mean d-score: beta=4 {ds_b4:.2f} vs beta=1 {ds_b1:.2f} (ties within 0.1 allowed)")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 8: determinism and formats


def test_criterion_8_determinism_and_formats(tmp_path):
    failures = []

    # identical seeds -> bit-identical metric logs and checkpoints
    cfg = TrainConfig(
        iterations=8, batch_videos=2, variant="factored", net_preset="desk", seed=77,
        prior=PriorConfig(f_s=2, f_t=2, n_frames=4), log_every=1, checkpoint_every=4,
    )
    stream = _tiny_stream(77)
    a = train(cfg, stream, out_dir=str(tmp_path / "a"))
    b = train(cfg, _tiny_stream(77), out_dir=str(tmp_path / "b"))
    if (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes():
        failures.append("metric logs differ between identical seeds")
    if a.final_checkpoint != b.final_checkpoint:
        failures.append("checkpoints differ between identical seeds")

    # checkpoint resume reproduces the uninterrupted log
    ck = (tmp_path / "a" / "checkpoint_0000004.fsvae").read_bytes()
    resumed = train(cfg, _tiny_stream(77), resume_from=ck)
    tail = [r for r in a.metrics if r["iter"] > 4]
    if json.dumps(tail) != json.dumps(resumed.metrics):
        failures.append("resumed log differs from uninterrupted log")

    # shard determinism and bit-exact round trips
    batch = _tiny_stream(78).batch(0, 3)
    write_shards([batch], tmp_path / "x.fsvd")
    write_shards([batch], tmp_path / "y.fsvd")
    if (tmp_path / "x.fsvd").read_bytes() != (tmp_path / "y.fsvd").read_bytes():
        failures.append("shard bytes differ for identical input")
    loaded = read_shards(tmp_path / "x.fsvd")[0]
    if not np.array_equal(loaded.frames, batch.frames):
        failures.append("shard pixel round trip not exact")

    # IDX round trip
    imgs = np.random.default_rng(79).integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    blob = serialize_idx(imgs)
    _, arr = parse_idx(blob)
    if serialize_idx(arr) != blob:
        failures.append("IDX round trip not bit-exact")

    # PGM determinism
    frames = batch.frames[0]
    emit_pgm_grid(frames, 1, len(frames), tmp_path / "g1.pgm")
    emit_pgm_grid(frames, 1, len(frames), tmp_path / "g2.pgm")
    if (tmp_path / "g1.pgm").read_bytes() != (tmp_path / "g2.pgm").read_bytes():
        failures.append("PGM output not byte-deterministic")

    report(8, not failures, "bit-identical logs/checkpoints/shards/PGM, exact round trips, resume replay"
           if not failures else "; ".join(failures))
    assert not failures


def _tiny_stream(seed):
    bounce = BounceConfig(n_frames=4, digit_classes=(0, 1, 2), seed=seed)
    return BouncingDigits.procedural(bounce, variants_per_class=3)


# ---------------------------------------------------------------------------
# Qualitative contracts on a trained model (reuse a desk checkpoint)


@pytest.fixture(scope="session")
def trained_desk_model(desk_runs):
    from fsvae.training import restore_checkpoint

    data = desk_runs[("factored", 4.0, SEEDS[0])]["checkpoint"]
    if data is None:  # stale cache without the checkpoint blob
        data = _run_desk("factored", 4.0, SEEDS[0])["checkpoint"]
    model, _, _, _ = restore_checkpoint(data)
    model.eval()
    return model


def test_interpolation_smoothness_on_trained_model(trained_desk_model):
    # consecutive decodes along the path move less than the endpoints differ
    model = trained_desk_model
    rng = np.random.default_rng(60)
    gaps, endpoint_gaps = [], []
    for pair in range(20):
        h0 = rng.standard_normal((1, DESK_PRIOR.f_total))
        h1 = rng.standard_normal((1, DESK_PRIOR.f_total))
        path = interpolate_latents(h0, h1, steps=6, factor="temporal", f_s=DESK_PRIOR.f_s)
        decoded = decode_frames(model, path)[:, 0]
        steps = np.abs(np.diff(decoded, axis=0)).mean(axis=(1, 2))
        gaps.append(steps.mean())
        endpoint_gaps.append(np.abs(decoded[-1] - decoded[0]).mean())
    assert np.mean(gaps) < np.mean(endpoint_gaps)


def test_static_factor_clusters_by_video_on_trained_model(trained_desk_model):
    # within-video spread of static encodings is below the between-video spread
    bounce = BounceConfig(n_frames=DESK_PRIOR.n_frames, digit_classes=DESK_CLASSES, seed=61)
    stream = BouncingDigits.procedural(bounce, variants_per_class=20)
    batch = stream.batch(0, 24)
    latents = sample_latents(trained_desk_model, batch.frames, seed=62)
    static = latents[:, :, : DESK_PRIOR.f_s]
    within = static.var(axis=1).mean()
    between = static.mean(axis=1).var(axis=0).mean()
    assert within < between
