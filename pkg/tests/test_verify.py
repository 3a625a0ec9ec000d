"""The self-check suite: green on a sound build, red under injected faults."""

import pytest

from fsvae import losses
from fsvae.verify import VerifyReport, check_collapse_identities, check_mc_agreement, run_verify


@pytest.mark.slow
def test_full_suite_passes():
    report = run_verify(seed=0)
    assert report.passed, report.render()
    assert len(report.checks) >= 20
    text = report.render()
    assert "PASS" in text and "deviation" in text and "tolerance" in text


def test_sign_flipped_static_term_is_caught():
    # the MC oracle must reject a corrupted analytic static cross-entropy
    flipped = lambda post, cfg: -losses.static_cross_entropy(post, cfg)
    checks = check_mc_agreement(seed=0, overrides={"static_cross_entropy": flipped}, n_posteriors=2, n_samples=20_000)
    factored = [c for c in checks if c.name.endswith("factored")]
    assert factored and not factored[0].passed
    # the untouched variants stay green
    assert all(c.passed for c in checks if "factored" not in c.name)


def test_collapse_identities_quick():
    assert all(c.passed for c in check_collapse_identities(seed=1))


def test_report_counts_failures():
    checks = check_collapse_identities(seed=2)
    checks[0].deviation = 1.0  # force one failure
    report = VerifyReport(checks)
    assert not report.passed
    assert "FAIL" in report.render()
