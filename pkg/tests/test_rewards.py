import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from codecrl.errors import ConfigError, InvalidInput
from codecrl.rewards import (AnchorSpec, Anchors, RewardWeights, aggregate, anchors_from_scores,
                             normalize_pesq, normalize_piecewise, reward_of)
from codecrl.synthworld import RawScores


def test_cer_anchor_points_exact():
    spec = AnchorSpec(1.0, 0.33, 0.0)
    assert normalize_piecewise(1.0, spec) == 0.0
    assert normalize_piecewise(0.0, spec) == 1.0
    assert normalize_piecewise(0.33, spec) == 0.5


def test_ssim_anchor_interpolation():
    spec = AnchorSpec(0.0, 0.6, 1.0)
    assert normalize_piecewise(0.6, spec) == 0.5
    assert normalize_piecewise(0.8, spec) == pytest.approx(0.75, abs=1e-12)
    assert normalize_piecewise(0.3, spec) == pytest.approx(0.25, abs=1e-12)


def test_out_of_range_clipped():
    spec = AnchorSpec(1.0, 0.4, 0.0)
    assert normalize_piecewise(1.7, spec) == 0.0
    assert normalize_piecewise(-0.2, spec) == 1.0


@pytest.mark.parametrize("raw, expected", [(4.5, 1.0), (0.0, 0.0), (5.2, 1.0), (-0.5, 0.0), (2.25, 0.5)])
def test_pesq(raw, expected):
    assert normalize_pesq(raw) == expected


def test_degenerate_anchor_single_segment():
    spec = AnchorSpec(1.0, 0.0, 0.0)
    assert spec.degenerate
    assert normalize_piecewise(0.25, spec) == pytest.approx(0.75)
    assert normalize_piecewise(0.0, spec) == 1.0


def test_invalid_anchors():
    with pytest.raises(ConfigError):
        AnchorSpec(0.5, 0.5, 0.5)
    with pytest.raises(ConfigError):
        AnchorSpec(0.0, 1.5, 1.0)


@given(st.floats(0.01, 0.99), st.floats(-1, 2), st.floats(-1, 2))
def test_monotone_and_bounded(mid, a, b):
    spec = AnchorSpec(1.0, mid, 0.0)
    fa, fb = normalize_piecewise(a, spec), normalize_piecewise(b, spec)
    assert 0.0 <= fa <= 1.0
    if a <= b:
        assert fa >= fb


def test_aggregate_examples():
    assert aggregate(1, 1, 1) == pytest.approx(1.0)
    assert aggregate(0.5, 0.5, 0.5) == pytest.approx(0.5)
    assert aggregate(1, 0, 0) == pytest.approx(0.45)
    with pytest.raises(InvalidInput):
        aggregate(1.2, 0, 0)


def test_weights_warn(caplog):
    with caplog.at_level(logging.WARNING):
        RewardWeights(0.5, 0.5, 0.5)
    assert "sum to" in caplog.text


def test_reward_of_clips_cer():
    anchors = Anchors.from_means(0.4, 0.6)
    r = reward_of(RawScores(cer=3.0, ssim=1.0, pesq=4.5), anchors)
    assert (r.r_cer, r.r_ssim, r.r_pesq) == (0.0, 1.0, 1.0)
    assert r.total == pytest.approx(0.55)


def test_anchors_from_scores_and_json():
    a = anchors_from_scores([0.2, 0.4, 5.0], [0.5, 0.7, 0.6])
    assert a.cer.baseline_mean == pytest.approx(1.6 / 3)
    assert a.ssim.baseline_mean == pytest.approx(0.6)
    assert Anchors.from_json(a.to_json()) == a


def test_degenerate_anchor_warns(caplog):
    with caplog.at_level(logging.WARNING):
        a = anchors_from_scores([0.0, 0.0], [0.5, 0.5])
    assert a.cer.degenerate and "single segment" in caplog.text


def test_vectorised_matches_scalar():
    spec = AnchorSpec(0.0, 0.37, 1.0)
    xs = np.linspace(-0.2, 1.2, 57)
    assert np.array_equal(normalize_piecewise(xs, spec), [normalize_piecewise(float(x), spec) for x in xs])


@pytest.mark.parametrize("raw, expected", [(0.0, 1.0), (0.3, 0.5), (0.65, 0.25), (1.7, 0.0)])
def test_cer_spec_examples(raw, expected):
    assert normalize_piecewise(raw, AnchorSpec(1.0, 0.3, 0.0)) == pytest.approx(expected, abs=1e-15)


def test_weighted_sum_without_quality():
    assert aggregate(1, 1, 0) == pytest.approx(0.9, abs=1e-15)
