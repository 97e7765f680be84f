import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from clvae.datamodel import ANOMALY, NORMAL
from clvae.losses import PerceptualBackbone
from clvae.metrics import (
    GaussianStats, MetricError, MetricsReport, accuracy, fid, fit_gaussian_stats, format_rate_table,
    frechet_distance, mse, roc_curve, tpr_fpr, trace_sqrt_product, write_roc_csv,
)
from tests import oracles


def _random_psd(d, seed):
    a = np.random.default_rng(seed).normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


# --------------------------------------------------------------------------- Gaussian stats


def test_gaussian_stats_examples():
    s = fit_gaussian_stats([[1.0, 2.0], [1.0, 2.0]])
    assert not s.cov.any()
    with pytest.raises(MetricError):
        fit_gaussian_stats([[1.0, 2.0]])


def test_gaussian_stats_sampling_oracle():
    n, d = 100_000, 4
    x = np.random.default_rng(0).standard_normal((n, d))
    s = fit_gaussian_stats(x)
    assert np.all(np.abs(s.mean) <= 3 / np.sqrt(n))
    se_diag = np.sqrt(2.0 / (n - 1))
    se_off = np.sqrt(1.0 / (n - 1))
    se = np.where(np.eye(d, dtype=bool), se_diag, se_off)
    assert np.all(np.abs(s.cov - np.eye(d)) <= 3 * se)


def test_gaussian_stats_validation():
    with pytest.raises(MetricError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 5)


# --------------------------------------------------------------------------- Frechet distance


def test_frechet_self_is_zero():
    c = _random_psd(6, 1)
    a = GaussianStats(np.arange(6.0), c, 10)
    assert frechet_distance(a, a) <= 1e-8


def test_frechet_equal_covariance_is_mean_distance():
    c = _random_psd(5, 2)
    v = np.random.default_rng(3).normal(size=5)
    got = frechet_distance(GaussianStats(np.zeros(5), c, 10), GaussianStats(v, c, 10))
    assert got == pytest.approx(float(v @ v), rel=1e-6)


def test_frechet_diagonal_closed_form():
    rng = np.random.default_rng(4)
    va, vb = rng.uniform(0.1, 3, 7), rng.uniform(0.1, 3, 7)
    ma, mb = rng.normal(size=7), rng.normal(size=7)
    expect = float(((np.sqrt(va) - np.sqrt(vb)) ** 2).sum() + ((ma - mb) ** 2).sum())
    got = frechet_distance(GaussianStats(ma, np.diag(va), 10), GaussianStats(mb, np.diag(vb), 10))
    assert got == pytest.approx(expect, rel=1e-6)


def test_frechet_dimension_mismatch():
    with pytest.raises(MetricError):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2), 3), GaussianStats(np.zeros(3), np.eye(3), 3))


def test_trace_sqrt_product_rank_deficient():
    a = np.diag([4.0, 0.0])
    b = np.diag([9.0, 5.0])
    assert trace_sqrt_product(a, b) == pytest.approx(6.0, rel=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianStats(rng.normal(size=d), _random_psd(d, seed), 5)
    b = GaussianStats(rng.normal(size=d), _random_psd(d, seed + 1), 5)
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-8 * max(1.0, ab)


# --------------------------------------------------------------------------- FID


@pytest.fixture(scope="module")
def backbone():
    return PerceptualBackbone(seed=0)


@pytest.fixture(scope="module")
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(40, 3, 32, 32, generator=g) * 0.6


def test_fid_identical_and_shuffled(backbone, images):
    assert fid(images, images, backbone) <= 1e-8
    perm = torch.randperm(len(images), generator=torch.Generator().manual_seed(1))
    assert fid(images, images[perm], backbone) <= 1e-8


def test_fid_monotone_in_brightness(backbone, images):
    vals = [fid(images, (images + s).clamp(0, 1), backbone) for s in (0.1, 0.2, 0.3)]
    assert vals[0] < vals[1] < vals[2]


def test_fid_errors(backbone, images):
    with pytest.raises(MetricError):
        fid(images[:1], images[:1], backbone)
    with pytest.raises(Exception):
        fid(torch.rand(4, 4, 32, 32), torch.rand(4, 4, 32, 32), backbone)


def test_mse():
    assert mse(np.zeros(4), np.full(4, 2.0)) == 4.0
    with pytest.raises(MetricError):
        mse(np.zeros(3), np.zeros(4))


# --------------------------------------------------------------------------- ROC


def test_roc_examples():
    assert roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_curve([0.5] * 6, [1, 0, 1, 0, 0, 1]).auc == 0.5
    with pytest.raises(MetricError):
        roc_curve([0.1, 0.2], [1, 1])


def test_roc_auc_exhaustive_against_mann_whitney():
    for n in range(2, 7):
        for scores in itertools.product((0.0, 1.0, 2.0), repeat=n):
            for labels in itertools.product((0, 1), repeat=n):
                if 0 < sum(labels) < n:
                    assert abs(roc_curve(scores, labels).auc - oracles.mann_whitney_auc(scores, labels)) <= 1e-12


@given(st.integers(7, 8).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 3).map(float), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n))))
@settings(max_examples=300, deadline=None)
def test_roc_auc_long_lists_against_mann_whitney(data):
    scores, labels = data
    if 0 < sum(labels) < len(labels):
        assert abs(roc_curve(scores, labels).auc - oracles.mann_whitney_auc(scores, labels)) <= 1e-12


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=30), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_roc_curve_shape_and_monotone_invariance(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    c = roc_curve(scores, labels)
    assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0) and (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert 0.0 <= c.auc <= 1.0
    # dense ranks: a strictly increasing map that cannot merge distinct floats
    transformed = roc_curve(stats.rankdata(scores, method="dense") * 3.0 + 7.0, labels)
    assert transformed.auc == pytest.approx(c.auc, abs=1e-12)


def test_roc_csv(tmp_path):
    write_roc_csv(roc_curve([0.3, 0.1], [1, 0]), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and lines[1].startswith("inf,0.0,0.0")


# --------------------------------------------------------------------------- rates


def test_tpr_fpr_examples():
    true = [ANOMALY, NORMAL, ANOMALY, NORMAL]
    assert tpr_fpr(true, true) == (1.0, 0.0)
    assert tpr_fpr([ANOMALY] * 4, true) == (1.0, 1.0)
    with pytest.raises(MetricError):
        tpr_fpr([NORMAL], [NORMAL])
    with pytest.raises(MetricError):
        tpr_fpr([ANOMALY], [ANOMALY])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=2, max_size=30), st.randoms())
@settings(max_examples=100, deadline=None)
def test_tpr_fpr_permutation_invariant(pairs, rnd):
    pairs = [(True, True), (False, False)] + pairs
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = tpr_fpr([p for p, _ in pairs], [t for _, t in pairs])
    b = tpr_fpr([p for p, _ in shuffled], [t for _, t in shuffled])
    assert a == b


def test_rate_table_format_and_accuracy():
    assert format_rate_table({"beta=0.01": (1.0, 0.3557)}) == "beta=0.01\tFPR 0.3557\tTPR 1"
    assert accuracy([ANOMALY, NORMAL], [ANOMALY, ANOMALY]) == 0.5


def test_metrics_report_roundtrip(tmp_path):
    r = MetricsReport(fid=1.5, mse=0.01, auroc=0.9, tpr=1.0, fpr=0.2, config_hash="abc", accuracy=0.8)
    r.write(tmp_path / "m.json")
    assert MetricsReport.read(tmp_path / "m.json") == r
