"""Confidence score encoder: (hyp log-prob, text, audio) -> scalar in (0, 1).

One LSTM per modality summarizes the variable-length embeddings; a
learned lift of the scalar hypothesis log-probability forms a length-1
attention query over each LSTM's states; the two attended summaries are
concatenated and squashed through a linear+sigmoid head.  Trained as a
weighted binary classifier (1 = hypothesis exactly correct), then frozen
before the NLU ever sees its scores.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import neural
from .simasr import SluRecord, check_balance

OBJECTIVES = ("weighted_classification", "regression", "focal")


class EmptyDataset(ValueError):
    """No examples to train on."""


class OverBudget(ValueError):
    """Encoder exceeds its parameter budget."""


@dataclass(frozen=True)
class ScoreEncoderConfig:
    embed_dim: int = 32
    hidden_dim: int = 16
    heads: int = 2
    param_budget: int = 20000
    seed: int = 0


class ScoreEncoder(nn.Module):
    def __init__(self, config: ScoreEncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = neural.make_generator(config.seed)
        d, h = config.embed_dim, config.hidden_dim
        self.lstm_txt = neural.init_lstm_(nn.LSTM(d, h, batch_first=True, dtype=dtype), gen)
        self.lstm_aud = neural.init_lstm_(nn.LSTM(d, h, batch_first=True, dtype=dtype), gen)
        self.query_txt = neural.make_linear(1, h, gen, dtype)
        self.query_aud = neural.make_linear(1, h, gen, dtype)
        self.attn_txt = neural.MultiHeadAttention(h, h, h, h, h, config.heads, gen, dtype)
        self.attn_aud = neural.MultiHeadAttention(h, h, h, h, h, config.heads, gen, dtype)
        self.head = neural.make_linear(2 * h, 1, gen, dtype)
        n = neural.param_count(self)
        if n > config.param_budget:
            raise OverBudget(f"{n} parameters exceed the budget of {config.param_budget}")

    def forward(
        self,
        hyp_logprob: Tensor,
        e_txt: Tensor,
        e_aud: Tensor,
        txt_mask: Optional[Tensor] = None,
        aud_mask: Optional[Tensor] = None,
    ) -> Tensor:
        """Score a batch: (B,), (B,U,D), (B,T,D) -> (B,) in (0, 1)."""
        squeeze = e_txt.dim() == 2
        if squeeze:
            hyp_logprob = hyp_logprob.view(1)
            e_txt, e_aud = e_txt[None], e_aud[None]
        b = e_txt.shape[0]
        lp = hyp_logprob.view(b, 1, 1).to(e_txt.dtype)
        h_txt = neural.lstm_forward(e_txt, self.lstm_txt)
        h_aud = neural.lstm_forward(e_aud, self.lstm_aud)
        s_txt, _ = self.attn_txt(self.query_txt(lp), h_txt, h_txt, key_mask=txt_mask)
        s_aud, _ = self.attn_aud(self.query_aud(lp), h_aud, h_aud, key_mask=aud_mask)
        score = torch.sigmoid(self.head(torch.cat([s_aud, s_txt], dim=-1)))[:, 0, 0]
        return score[0] if squeeze else score

    def param_store(self) -> neural.ParamStore:
        return neural.ParamStore(
            module=self, config={"score_encoder": vars(self.config).copy()}, seed=self.config.seed
        )


# ---------------------------------------------------------------------------
# Batching


@dataclass
class ScoreBatch:
    hyp_logprob: Tensor
    e_txt: Tensor
    e_aud: Tensor
    txt_mask: Tensor
    aud_mask: Tensor
    label: Tensor


def collate_records(records: Sequence[SluRecord], dtype: torch.dtype = torch.float32) -> ScoreBatch:
    b = len(records)
    u_max = max(r.e_txt.shape[0] for r in records)
    t_max = max(r.e_aud.shape[0] for r in records)
    d = records[0].e_txt.shape[1]
    e_txt = np.zeros((b, u_max, d), dtype=np.float32)
    e_aud = np.zeros((b, t_max, d), dtype=np.float32)
    txt_mask = np.zeros((b, u_max), dtype=bool)
    aud_mask = np.zeros((b, t_max), dtype=bool)
    lp = np.zeros(b, dtype=np.float32)
    label = np.zeros(b, dtype=np.float32)
    for i, r in enumerate(records):
        u, t = r.e_txt.shape[0], r.e_aud.shape[0]
        e_txt[i, :u] = r.e_txt
        e_aud[i, :t] = r.e_aud
        txt_mask[i, :u] = True
        aud_mask[i, :t] = True
        lp[i] = r.hyp_logprob
        label[i] = r.label
    return ScoreBatch(
        hyp_logprob=torch.from_numpy(lp).to(dtype),
        e_txt=torch.from_numpy(e_txt).to(dtype),
        e_aud=torch.from_numpy(e_aud).to(dtype),
        txt_mask=torch.from_numpy(txt_mask),
        aud_mask=torch.from_numpy(aud_mask),
        label=torch.from_numpy(label).to(dtype),
    )


@torch.no_grad()
def score_records(model: ScoreEncoder, records: Sequence[SluRecord], batch_size: int = 256) -> np.ndarray:
    """Frozen-model scores for a record list, batch-composition invariant."""
    out = np.zeros(len(records), dtype=np.float64)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = collate_records(chunk)
        s = model(batch.hyp_logprob, batch.e_txt, batch.e_aud, batch.txt_mask, batch.aud_mask)
        out[start : start + len(chunk)] = s.double().numpy()
    return out


# ---------------------------------------------------------------------------
# Metrics


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC (ties get midranks)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n1 * (n1 + 1) / 2) / (n0 * n1)


@dataclass
class ClassifierMetrics:
    accuracy: float
    precision: float
    recall: float
    auc: float
    n: int


def classifier_metrics(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> ClassifierMetrics:
    labels = np.asarray(labels)
    pred = (np.asarray(scores) >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    acc = float(np.mean(pred == labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return ClassifierMetrics(
        accuracy=acc, precision=precision, recall=recall,
        auc=roc_auc(labels, scores), n=len(labels),
    )


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class ScoreTrainConfig:
    objective: str = "weighted_classification"
    w1: float = 0.3
    w0: float = 0.7
    batch_size: int = 64
    max_epochs: int = 15
    patience: int = 3
    lr: float = 1e-3
    holdout_fraction: float = 0.1
    seed: int = 0


@dataclass
class ScoreTrainResult:
    metrics: ClassifierMetrics
    train_losses: list[float] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_score_encoder(
    model: ScoreEncoder,
    records: Sequence[SluRecord],
    cfg: ScoreTrainConfig = ScoreTrainConfig(),
) -> ScoreTrainResult:
    """Fit the weighted binary classifier, then freeze the encoder.

    Expects a class-balanced record list (see ``simasr.balance_augment``);
    a heavily skewed one triggers an UnbalancedDatasetWarning.  Held-out
    metrics come from a seeded tail split.  Only the winning objective is
    implemented; ``regression`` and ``focal`` are config stubs.
    """
    if cfg.objective != "weighted_classification":
        if cfg.objective in OBJECTIVES:
            raise NotImplementedError(f"objective {cfg.objective!r} is a config stub")
        raise ValueError(f"unknown objective {cfg.objective!r}")
    if len(records) == 0:
        raise EmptyDataset("no score-encoder training records")
    check_balance(records)

    t0 = time.time()
    rng = np.random.default_rng([cfg.seed, 101])
    order = rng.permutation(len(records))
    n_hold = max(1, int(len(records) * cfg.holdout_fraction))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    train_set = [records[i] for i in train_idx]
    hold_set = [records[i] for i in hold_idx]

    params = list(model.parameters())
    state = neural.AdamState()
    result = ScoreTrainResult(metrics=None)  # type: ignore[arg-type]
    best_loss = float("inf")
    best_state = None
    since_best = 0
    epoch_rng = np.random.default_rng([cfg.seed, 102])
    for _ in range(cfg.max_epochs):
        perm = epoch_rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = collate_records([train_set[i] for i in idx])
            p = model(batch.hyp_logprob, batch.e_txt, batch.e_aud, batch.txt_mask, batch.aud_mask)
            loss = neural.weighted_bce(p, batch.label, cfg.w1, cfg.w0)
            model.zero_grad(set_to_none=True)
            loss.backward()
            neural.adam_step(params, [p_.grad for p_ in params], state, lr=cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        result.train_losses.append(total / count)
        hold_scores = score_records(model, hold_set)
        hold_labels = np.array([r.label for r in hold_set])
        p_t = torch.from_numpy(np.clip(hold_scores, 1e-7, 1 - 1e-7))
        valid_loss = neural.weighted_bce(p_t, torch.from_numpy(hold_labels.astype(np.float64)), cfg.w1, cfg.w0).item()
        result.valid_losses.append(valid_loss)
        if valid_loss < best_loss - 1e-6:
            best_loss = valid_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    freeze(model)
    result.metrics = classifier_metrics(
        np.array([r.label for r in hold_set]), score_records(model, hold_set)
    )
    result.seconds = time.time() - t0
    return result


def freeze(model: ScoreEncoder) -> ScoreEncoder:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def eval_score_threshold(
    model: ScoreEncoder, records: Sequence[SluRecord], threshold: float = 0.5
) -> float:
    """Accuracy of thresholded scores against the binary labels."""
    scores = score_records(model, records)
    labels = np.array([r.label for r in records])
    return float(np.mean((scores >= threshold).astype(int) == labels))
