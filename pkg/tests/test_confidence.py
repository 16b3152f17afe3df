from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcslu.confidence import (
    ConfidenceScore,
    InvalidScore,
    NegativeWer,
    NonBinaryScore,
    binary_oracle_score,
    flip_scores,
    integrate_append_fusion,
    integrate_mul,
    oracle_score,
)


# ---------------------------------------------------------------------------
# oracle score


def test_oracle_score_perfect_hypothesis():
    assert oracle_score(0.0).value == 1.0


def test_oracle_score_clamps_large_wer():
    assert oracle_score(2.0).value == 0.0


def test_oracle_score_formula():
    assert oracle_score(0.25).value == pytest.approx(0.75)


def test_oracle_score_negative_wer():
    with pytest.raises(NegativeWer):
        oracle_score(-0.1)


def test_binary_oracle_score():
    assert binary_oracle_score(0.0).value == 1.0
    assert binary_oracle_score(0.2).value == 0.0
    with pytest.raises(NegativeWer):
        binary_oracle_score(-1.0)


def test_confidence_score_validation():
    with pytest.raises(InvalidScore):
        ConfidenceScore(1.2, "oracle")
    with pytest.raises(InvalidScore):
        ConfidenceScore(0.5, "tarot")
    assert ConfidenceScore(0.5, "encoder").source == "encoder"


# ---------------------------------------------------------------------------
# integration transforms


def test_integrate_mul_endpoints():
    e_txt = torch.randn(3, 4)
    e_aud = torch.randn(5, 4)
    txt1, aud1 = integrate_mul(e_txt, e_aud, 1.0)
    assert torch.equal(txt1, e_txt)
    assert torch.equal(aud1, torch.zeros_like(e_aud))
    txt0, aud0 = integrate_mul(e_txt, e_aud, 0.0)
    assert torch.equal(txt0, torch.zeros_like(e_txt))
    assert torch.equal(aud0, e_aud)


def test_integrate_mul_halves_both():
    e_txt = torch.ones(2, 3)
    e_aud = torch.ones(4, 3)
    txt, aud = integrate_mul(e_txt, e_aud, 0.5)
    assert torch.allclose(txt, 0.5 * torch.ones(2, 3))
    assert torch.allclose(aud, 0.5 * torch.ones(4, 3))


def test_integrate_append_shapes_and_content():
    e_txt = torch.randn(3, 4)
    e_aud = torch.randn(5, 4)
    txt, aud = integrate_append_fusion(e_txt, e_aud, 0.3)
    assert txt.shape == (3, 5)
    assert aud.shape == (5, 5)
    assert torch.equal(txt[:, :4], e_txt)
    assert torch.equal(aud[:, :4], e_aud)
    assert torch.allclose(txt[:, 4], torch.full((3,), 0.3))
    assert torch.allclose(aud[:, 4], torch.full((5,), 0.3))


def test_integrate_append_batched_scores():
    e_txt = torch.randn(2, 3, 4)
    e_aud = torch.randn(2, 5, 4)
    score = torch.tensor([0.2, 0.9])
    txt, aud = integrate_append_fusion(e_txt, e_aud, score)
    assert torch.allclose(txt[0, :, 4], torch.full((3,), 0.2))
    assert torch.allclose(aud[1, :, 4], torch.full((5,), 0.9))


def test_integrate_rejects_out_of_range_score():
    with pytest.raises(InvalidScore):
        integrate_mul(torch.ones(1, 2), torch.ones(1, 2), 1.5)


# ---------------------------------------------------------------------------
# score flipping


def test_flip_ratio_zero_is_identity():
    scores = np.array([1.0, 0.0, 1.0, 1.0])
    assert np.array_equal(flip_scores(scores, 0.0, seed=1), scores)


def test_flip_ratio_one_inverts_everything():
    scores = np.array([1.0, 0.0, 1.0])
    assert np.array_equal(flip_scores(scores, 1.0, seed=1), 1.0 - scores)


def test_flip_exact_count():
    scores = np.ones(100)
    flipped = flip_scores(scores, 0.5, seed=7)
    assert int((flipped != scores).sum()) == 50


def test_flip_floor_of_ratio_n():
    scores = np.ones(10)
    flipped = flip_scores(scores, 0.25, seed=3)
    assert int((flipped != scores).sum()) == 2


def test_flip_deterministic_under_seed():
    scores = np.ones(50)
    assert np.array_equal(flip_scores(scores, 0.3, seed=9), flip_scores(scores, 0.3, seed=9))


def test_flip_rejects_non_binary():
    with pytest.raises(NonBinaryScore):
        flip_scores(np.array([0.5, 1.0]), 0.1, seed=0)


def test_flip_rejects_bad_ratio():
    with pytest.raises(ValueError):
        flip_scores(np.array([1.0]), 1.5, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=40), st.integers(0, 2**20))
def test_flip_full_ratio_is_involution(bits, seed):
    scores = np.array(bits)
    once = flip_scores(scores, 1.0, seed)
    twice = flip_scores(once, 1.0, seed)
    assert np.array_equal(twice, scores)
