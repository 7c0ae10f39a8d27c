import math

import numpy as np
import pytest

from stmoe.errors import AlignmentError, ConfigError, CorpusError, SampleSizeError
from stmoe.stats import (
    all_pairs_report,
    block_bootstrap_ci,
    block_bootstrap_means,
    bootstrap_means,
    paired_bootstrap_ci,
    read_loss_file,
    read_loss_files,
    seed_variance,
    tost,
    write_loss_file,
    zero_in_ci,
)


def _noise(n=100, scale=0.01, seed=0):
    d = np.random.default_rng(seed).normal(0.0, scale, n)
    return d - d.mean()


def test_constant_differences_give_a_degenerate_interval():
    ci = paired_bootstrap_ci([0.02] * 50)
    assert (ci.mean, ci.lo, ci.hi) == (0.02, 0.02, 0.02)


def test_tost_margin_is_inclusive():
    assert tost([0.02] * 50, 0.02).equivalent
    assert not tost([0.0201] * 50, 0.02).equivalent


def test_bootstrap_is_deterministic_per_seed():
    d = _noise()
    a = paired_bootstrap_ci(d, 2000, seed=5)
    b = paired_bootstrap_ci(d, 2000, seed=5)
    c = paired_bootstrap_ci(d, 2000, seed=6)
    assert a == b
    assert a != c


def test_ci_covers_zero_for_centred_noise():
    d = _noise()
    assert zero_in_ci(d, 2000)
    assert not zero_in_ci(d + 0.05, 2000)


def test_ninety_is_narrower_than_ninety_five():
    d = _noise(seed=3)
    assert paired_bootstrap_ci(d, 2000, level=0.90).width < paired_bootstrap_ci(d, 2000, level=0.95).width


def test_tost_verdicts():
    d = _noise(scale=0.001)
    res = tost(d, 0.01, 2000)
    assert res.equivalent and res.p_value < 0.05
    shifted = tost(d + 0.05, 0.01, 2000)
    assert not shifted.equivalent and shifted.p_value > 0.5


def test_input_checks():
    with pytest.raises(SampleSizeError):
        paired_bootstrap_ci([0.1])
    with pytest.raises(ConfigError):
        tost([0.1, 0.2], 0.0)
    with pytest.raises(ConfigError):
        paired_bootstrap_ci([0.1, 0.2], level=1.0)
    with pytest.raises(ConfigError):
        block_bootstrap_means([0.1, 0.2], block=3)


def test_block_of_one_is_the_paired_bootstrap():
    d = _noise(n=40)
    np.testing.assert_array_equal(block_bootstrap_means(d, 1, 500, 9), bootstrap_means(d, 500, 9))


def test_blocks_widen_the_interval_for_autocorrelated_losses():
    rng = np.random.default_rng(1)
    walk = np.cumsum(rng.normal(0.0, 0.01, 200))
    d = walk - walk.mean()
    narrow = block_bootstrap_ci(d, 1, 2000)
    wide = block_bootstrap_ci(d, 20, 2000)
    assert wide.width > narrow.width


def test_all_pairs_report():
    rng = np.random.default_rng(0)
    base = rng.normal(4.0, 0.1, 60)
    variants = {"a": base, "b": base + 0.001, "c": base + 0.05}
    report = all_pairs_report(variants, [0.01, 0.02], resamples=1000, block_sizes=[1, 5])
    assert report.n_pairs == 3 and report.n_batches == 60
    pairs = {(p.a, p.b): p for p in report.pairs}
    assert pairs[("a", "b")].verdicts[0.01]
    assert not pairs[("a", "c")].verdicts[0.02]
    assert report.counts() == {0.01: 1, 0.02: 1}
    assert set(pairs[("a", "b")].block_widths) == {1, 5}
    recs = report.records()
    assert recs[0]["kind"] == "summary" and len(recs) == 4


def test_pair_result_does_not_depend_on_other_variants():
    rng = np.random.default_rng(4)
    a, b, c = (rng.normal(3.0, 0.1, 30) for _ in range(3))
    two = all_pairs_report({"a": a, "b": b}, [0.01], resamples=500)
    three = all_pairs_report({"a": a, "b": b, "c": c}, [0.01], resamples=500)
    assert two.pairs[0].ci95 == three.pairs[0].ci95


def test_all_pairs_input_checks():
    with pytest.raises(AlignmentError):
        all_pairs_report({"a": [1.0, 2.0], "b": [1.0, 2.0, 3.0]}, [0.01])
    with pytest.raises(ConfigError):
        all_pairs_report({"a": [1.0, 2.0]}, [0.01])


def test_seed_variance():
    sv = seed_variance({"a": [1.0, 3.0], "b": [2.0, 4.0]})
    assert sv.spread == pytest.approx(1.0)
    assert sv.avg_std == pytest.approx(math.sqrt(2.0))
    assert sv.ratio == pytest.approx(1.0 / math.sqrt(2.0))
    assert not sv.ratio_flagged


def test_seed_variance_zero_noise_is_flagged():
    sv = seed_variance({"a": [1.0, 1.0], "b": [2.0, 2.0]})
    assert sv.ratio_flagged and math.isinf(sv.ratio)


def test_seed_variance_needs_two_seeds():
    with pytest.raises(SampleSizeError):
        seed_variance({"a": [1.0]})


def test_loss_files(tmp_path):
    path = write_loss_file(tmp_path / "deep_s42.losses", [1.5, 2.25], header="hops=3\ntop_k=4")
    label, values = read_loss_file(path)
    assert label == "deep_s42"
    assert values.tolist() == [1.5, 2.25]
    assert path.read_text().startswith("# hops=3\n")


def test_loss_file_errors(tmp_path):
    with pytest.raises(CorpusError):
        read_loss_file(tmp_path / "missing.losses")
    bad = tmp_path / "bad.losses"
    bad.write_text("1.0\nabc\n")
    with pytest.raises(CorpusError):
        read_loss_file(bad)
    (tmp_path / "x").mkdir()
    first = write_loss_file(tmp_path / "v.losses", [1.0, 2.0])
    second = write_loss_file(tmp_path / "x" / "v.losses", [1.0, 2.0])
    with pytest.raises(ConfigError):
        read_loss_files([first, second])


def test_identical_variants_are_all_equivalent():
    base = np.random.default_rng(2).normal(4.0, 0.2, 50)
    variants = {f"v{i}": base.copy() for i in range(5)}
    report = all_pairs_report(variants, [0.03], resamples=1000)
    assert report.n_pairs == 10
    assert report.counts()[0.03] == 10


def test_shifted_variant_fails_against_all():
    base = np.random.default_rng(2).normal(4.0, 0.2, 50)
    variants = {f"v{i}": base.copy() for i in range(4)}
    variants["shifted"] = base + 0.033
    report = all_pairs_report(variants, [0.03], resamples=1000)
    for pair in report.pairs:
        assert pair.verdicts[0.03] == ("shifted" not in (pair.a, pair.b))


def test_tost_is_monotone_in_margin():
    d = _noise(scale=0.01, seed=8) + 0.004
    verdicts = [tost(d, m, 2000).equivalent for m in (0.001, 0.003, 0.005, 0.01, 0.02)]
    assert verdicts == sorted(verdicts)
    assert verdicts[-1]


def test_percentile_interval_matches_independent_oracle():
    d = _noise(n=30, seed=12) + 0.01
    resamples, seed = 3000, 17
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    means = d[idx].mean(axis=1)
    ci = paired_bootstrap_ci(d, resamples, 0.95, seed)
    assert ci.lo == pytest.approx(np.percentile(means, 2.5))
    assert ci.hi == pytest.approx(np.percentile(means, 97.5))
    assert ci.mean == pytest.approx(d.mean())
