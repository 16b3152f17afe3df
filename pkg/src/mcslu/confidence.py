"""Modality-confidence scores and how they enter the model.

A score lives in [0, 1]: near 1 means the hypothesis text is reliable,
near 0 means the audio should be trusted instead.  Three integration
routes exist: multiplying the score into the two embedding streams,
appending it as an extra feature column before fusion, and additionally
feeding it to the copy gate in the decoder.  Integration mode is a
model-construction choice (it changes parameter shapes), so each mode is
a separately trained model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

MODES = ("baseline", "mul_fusion", "append_fusion", "append_fusion_dec")

SCORE_SOURCES = ("oracle", "oracle_binary", "encoder", "constant")


class NegativeWer(ValueError):
    """WER fed to the oracle score was negative."""


class NonBinaryScore(ValueError):
    """Score flipping is only defined for binary 0/1 scores."""


class InvalidScore(ValueError):
    """Confidence value left [0, 1]."""


class MissingScore(ValueError):
    """The model's integration mode requires a score that was not given."""


@dataclass(frozen=True)
class ConfidenceScore:
    """A scalar confidence with its provenance."""

    value: float
    source: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise InvalidScore(f"confidence must be in [0, 1], got {self.value}")
        allowed = SCORE_SOURCES + ("flipped_oracle",)
        if self.source not in allowed:
            raise InvalidScore(f"unknown score source {self.source!r}")


def oracle_score(wer_value: float) -> ConfidenceScore:
    """Perfect-information confidence: 1 - min(1, WER)."""
    if wer_value < 0:
        raise NegativeWer(f"WER must be nonnegative, got {wer_value}")
    return ConfidenceScore(value=1.0 - min(1.0, wer_value), source="oracle")


def binary_oracle_score(wer_value: float) -> ConfidenceScore:
    """Binary flavor: 1 iff the hypothesis is exactly correct."""
    if wer_value < 0:
        raise NegativeWer(f"WER must be nonnegative, got {wer_value}")
    return ConfidenceScore(value=1.0 if wer_value == 0 else 0.0, source="oracle")


def integrate_mul(e_txt: torch.Tensor, e_aud: torch.Tensor, score: torch.Tensor | float):
    """Scale text by the score and audio by its complement."""
    score = _as_scalar_tensor(score, e_txt)
    return score * e_txt, (1.0 - score) * e_aud


def integrate_append_fusion(e_txt: torch.Tensor, e_aud: torch.Tensor, score: torch.Tensor | float):
    """Append the score as one extra feature column on every timestep."""
    score = _as_scalar_tensor(score, e_txt)
    txt_col = score.expand(*e_txt.shape[:-1], 1)
    aud_col = score.expand(*e_aud.shape[:-1], 1)
    return torch.cat([e_txt, txt_col], dim=-1), torch.cat([e_aud, aud_col], dim=-1)


def _as_scalar_tensor(score, like: torch.Tensor) -> torch.Tensor:
    if isinstance(score, torch.Tensor):
        score = score.to(like.dtype)
    else:
        if not 0.0 <= float(score) <= 1.0:
            raise InvalidScore(f"score must be in [0, 1], got {score}")
        score = torch.tensor(float(score), dtype=like.dtype)
    # broadcast (B,) batch scores over (B, L, D) streams
    while score.dim() > 0 and score.dim() < like.dim():
        score = score[..., None]
    return score


def flip_scores(binary_scores, ratio: float, seed: int) -> np.ndarray:
    """Invert a uniformly random floor(ratio*n)-subset of binary scores."""
    scores = np.asarray(binary_scores, dtype=np.float64)
    if not np.all((scores == 0.0) | (scores == 1.0)):
        raise NonBinaryScore("flip_scores requires binary 0/1 scores")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"flip ratio must be in [0, 1], got {ratio}")
    n = scores.size
    k = int(np.floor(ratio * n))
    picked = np.random.default_rng(seed).permutation(n)[:k]
    out = scores.copy()
    out[picked] = 1.0 - out[picked]
    return out
