import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from clvae.datamodel import ANOMALY, NORMAL, ClassFrequencyTable, DataError, ImageSample, SynthSceneSpec, \
    generate_synthetic_dataset
from clvae.discrepancy import (
    DiscrepancyImage, FileDiscrepancy, LabelMap, Replacement, ReplacementPlan, attach_fourth_channel,
    find_instances, frequency_based_label_replacement, label_replacement, make_provider, mean_anomaly_score,
    oracle_discrepancy, random_label_replacement, score_distribution_stats, strip_fourth_channel,
    write_discrepancy_png, write_stats_csv,
)
from tests import oracles

A, B, C = 0, 1, 2
ABC = ClassFrequencyTable.from_frequencies({A: 0.70, B: 0.25, C: 0.05})


def _single_instance_map(cls=A, vocab=(A, B, C)):
    return LabelMap(np.full((8, 8), cls, dtype=np.int32), frozenset(vocab))


def _draw_replacements(fn, n_draws):
    counts = Counter()
    for seed in range(n_draws):
        _, plan = fn(seed)
        counts[plan.entries[0].replacement] += 1
    return counts


# --------------------------------------------------------------------------- replacement


def test_forced_choice():
    lm = _single_instance_map(A, (A, B))
    table = ClassFrequencyTable.from_frequencies({A: 0.9, B: 0.1})
    for seed in range(20):
        new, plan = frequency_based_label_replacement(lm, table, 1, seed)
        assert plan.entries == [Replacement(0, A, B)]
        assert np.all(new.classes == B)
        _, plan = random_label_replacement(lm, 1, seed)
        assert plan.entries[0].replacement == B


def test_zero_objects_is_noop():
    lm = _single_instance_map()
    new, plan = frequency_based_label_replacement(lm, ABC, 0, seed=1)
    assert np.array_equal(new.classes, lm.classes) and plan.entries == []


def test_too_many_objects_rejected():
    with pytest.raises(ValueError):
        random_label_replacement(_single_instance_map(), 2, seed=0)


def test_self_replacement_rejected():
    with pytest.raises(ValueError):
        ReplacementPlan([Replacement(0, 3, 3)])


def test_frequency_table_must_cover_vocabulary():
    with pytest.raises(ValueError):
        frequency_based_label_replacement(_single_instance_map(vocab=(A, B, C, 7)), ABC, 1, seed=0)


def test_same_seed_same_plan():
    rng = np.random.default_rng(0)
    m = np.repeat(np.repeat(rng.integers(0, 4, (6, 6)), 5, axis=0), 5, axis=1).astype(np.int32)
    lm = LabelMap(m)
    a = random_label_replacement(lm, 5, seed=9)
    b = random_label_replacement(lm, 5, seed=9)
    assert a[1].entries == b[1].entries and np.array_equal(a[0].classes, b[0].classes)
    assert all(e.original != e.replacement for e in a[1].entries)


def test_find_instances_four_connected_and_min_area():
    m = np.zeros((10, 10), np.int32)
    m[0:4, 0:4] = 1
    m[4:8, 4:8] = 1  # diagonal contact only
    m[9, 9] = 2
    ids, classes, masks = find_instances(LabelMap(m), min_area=16)
    assert classes == [0, 1, 1]
    assert [int(k.sum()) for k in masks] == [100 - 33, 16, 16]


def test_frequency_mode_chi_square():
    n = 10_000
    counts = _draw_replacements(lambda s: frequency_based_label_replacement(_single_instance_map(), ABC, 1, s), n)
    assert set(counts) <= {B, C}
    expected = np.array([0.25, 0.05]) / 0.30 * n
    assert stats.chisquare([counts[B], counts[C]], expected).pvalue > 0.01


def test_uniform_mode_chi_square():
    n = 10_000
    counts = _draw_replacements(lambda s: random_label_replacement(_single_instance_map(vocab=(A, B, C, 3, 4)), 1, s),
                                n)
    observed = [counts[c] for c in (B, C, 3, 4)]
    assert sum(observed) == n
    assert stats.chisquare(observed).pvalue > 0.01


def test_frequency_mode_picks_rare_class_less_than_uniform():
    n = 10_000
    freq = _draw_replacements(lambda s: label_replacement(_single_instance_map(), 1, s, "frequency", ABC), n)
    unif = _draw_replacements(lambda s: label_replacement(_single_instance_map(), 1, s, "uniform"), n)
    assert freq[C] < unif[C]


# --------------------------------------------------------------------------- discrepancy images


def _anomaly_sample(size=16):
    mask = np.zeros((size, size), bool)
    mask[5:9, 6:10] = True
    return ImageSample("a0", np.full((size, size, 3), 0.5), ANOMALY, anomaly_mask=mask)


def test_oracle_noise_free_normal_is_zero():
    s = ImageSample("n0", np.full((16, 16, 3), 0.5), NORMAL)
    assert not oracle_discrepancy(s, 0.0, seed=0).scores.any()


def test_oracle_noise_free_support_is_blurred_mask():
    s = _anomaly_sample()
    d = oracle_discrepancy(s, 0.0, seed=0).scores
    dilated = np.zeros_like(s.anomaly_mask)
    ys, xs = np.nonzero(s.anomaly_mask)
    for y, x in zip(ys, xs):
        dilated[max(0, y - 1):y + 2, max(0, x - 1):x + 2] = True
    assert np.array_equal(d > 0, dilated)
    assert np.all(d[s.anomaly_mask.nonzero()] > 0)


def test_oracle_anomaly_without_mask_rejected():
    s = ImageSample("bad", np.zeros((8, 8, 3)), ANOMALY)
    with pytest.raises(DataError):
        oracle_discrepancy(s, 0.1, seed=0)


@pytest.mark.parametrize("noise", [0.0, 0.05, 0.2])
def test_oracle_anomalous_mean_exceeds_normal(noise):
    samples = generate_synthetic_dataset(SynthSceneSpec(seed=6, image_size=32), 50, 50)
    means = {NORMAL: [], ANOMALY: []}
    for s in samples:
        d = oracle_discrepancy(s, noise, seed=1)
        assert d.scores.min() >= 0 and d.scores.max() <= 1
        means[s.label].append(mean_anomaly_score(d))
    assert np.mean(means[ANOMALY]) > np.mean(means[NORMAL])


def test_oracle_deterministic_per_sample():
    s = _anomaly_sample()
    assert np.array_equal(oracle_discrepancy(s, 0.1, 3).scores, oracle_discrepancy(s, 0.1, 3).scores)
    assert not np.array_equal(oracle_discrepancy(s, 0.1, 3).scores, oracle_discrepancy(s, 0.1, 4).scores)


def test_discrepancy_image_range_enforced():
    with pytest.raises(ValueError):
        DiscrepancyImage(np.full((2, 2), 1.01))
    with pytest.raises(ValueError):
        DiscrepancyImage(np.full((2, 2), -0.1))


def test_file_provider_roundtrip(tmp_path):
    s = _anomaly_sample(16)
    d = oracle_discrepancy(s, 0.0, 0)
    write_discrepancy_png(d, tmp_path / f"{s.id}.png")
    got = FileDiscrepancy(str(tmp_path))(s)
    assert np.allclose(got.scores, d.scores, atol=0.5 / 255 + 1e-7)
    with pytest.raises(DataError):
        FileDiscrepancy()(s)
    assert isinstance(make_provider("file", directory=str(tmp_path)), FileDiscrepancy)
    with pytest.raises(ValueError):
        make_provider("gan")


# --------------------------------------------------------------------------- scores


def test_mean_anomaly_score_examples():
    assert mean_anomaly_score(DiscrepancyImage(np.zeros((4, 4)))) == 0.0
    assert mean_anomaly_score(DiscrepancyImage(np.ones((4, 4)))) == 1.0
    half = np.zeros((4, 4))
    half[:2] = 1
    assert mean_anomaly_score(DiscrepancyImage(half)) == 0.5


def test_mean_anomaly_score_matches_loop():
    x = np.random.default_rng(0).random((33, 17))
    d = DiscrepancyImage(x)
    assert abs(mean_anomaly_score(d) - oracles.mean_loop(d.scores.astype(np.float64))) <= 1e-10


def _sorted_quantile(values, q):
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def test_score_stats_examples():
    s = score_distribution_stats([0.5])
    assert (s.min, s.q1, s.median, s.q3, s.max, s.mean) == (0.5,) * 6
    assert score_distribution_stats([0.0, 1.0]).median == 0.5
    with pytest.raises(ValueError):
        score_distribution_stats([])


def test_score_stats_match_sort_oracle():
    vals = np.random.default_rng(3).random(101).tolist()
    s = score_distribution_stats(vals)
    for q, got in ((0, s.min), (0.25, s.q1), (0.5, s.median), (0.75, s.q3), (1, s.max)):
        assert got == pytest.approx(_sorted_quantile(vals, q), abs=1e-12)
    assert s.mean == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_stats_csv(tmp_path):
    write_stats_csv({"ra21": score_distribution_stats([0.1, 0.3])}, tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["dataset", "n", "min", "q1", "median", "q3", "max", "mean"]
    assert rows[1][:2] == ["ra21", "2"]


# --------------------------------------------------------------------------- fourth channel


def test_attach_zero_discrepancy():
    s = _anomaly_sample()
    out = attach_fourth_channel(s, DiscrepancyImage(np.zeros(s.size)))
    assert out.channels == 4 and not out.pixels[..., 3].any()
    assert np.array_equal(out.pixels[..., :3], s.pixels)


def test_attach_twice_and_mismatch_rejected():
    s = _anomaly_sample()
    d = DiscrepancyImage(np.zeros(s.size))
    with pytest.raises(DataError):
        attach_fourth_channel(attach_fourth_channel(s, d), d)
    with pytest.raises(DataError):
        attach_fourth_channel(s, DiscrepancyImage(np.zeros((4, 4))))
    with pytest.raises(DataError):
        strip_fourth_channel(s)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_strip_attach_roundtrip(seed):
    rng = np.random.default_rng(seed)
    s = ImageSample("x", rng.random((8, 8, 3)).astype(np.float32), NORMAL)
    d = DiscrepancyImage(rng.random((8, 8)))
    back = strip_fourth_channel(attach_fourth_channel(s, d))
    assert back.pixels.tobytes() == s.pixels.tobytes()
