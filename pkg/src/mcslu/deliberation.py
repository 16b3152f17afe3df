"""Deliberation-style NLU: fuse frozen-ASR embeddings, pool, and decode
a linearized parse with a pointer-generator head.

The fusion module cross-attends with hypothesis-text embeddings as the
query and audio embeddings as key/value.  The decoder is a single
transformer decoder layer whose state feeds (a) a generation softmax
over the full vocabulary, (b) a one-head pointer attention over the
pooled source whose weights are scattered onto source-token identities
to form the copy distribution, and (c) a sigmoid gate mixing the two.
Confidence scores enter according to the model's integration mode; see
:mod:`mcslu.confidence`.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import neural
from .confidence import (
    MODES,
    MissingScore,
    integrate_append_fusion,
    integrate_mul,
)
from .semtext import exact_match
from .simasr import FrozenAsrFrontend, SluRecord

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class Vocabulary:
    """Joint vocabulary: specials, closing bracket, ontology open tokens,
    then corpus words.  Source words are a subset, so pointer attention
    mass can be scattered straight onto vocabulary indices."""

    def __init__(self, words: Sequence[str], ontology: Sequence[str]):
        open_tokens = ["[" + sym for sym in sorted(ontology)]
        self.tokens: tuple[str, ...] = tuple([PAD, BOS, EOS, "]"] + open_tokens + sorted(words))
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class NluConfig:
    embed_dim: int = 32
    model_dim: int = 32
    fusion_heads: int = 2
    pooling_layers: int = 2
    pooling_heads: int = 2
    decoder_heads: int = 2
    pointer_heads: int = 1
    ff_dim: int = 64
    mode: str = "baseline"
    renormalize_mixture: bool = False
    max_decode_len: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class DecodeStep:
    """Everything one decoder step produces."""

    d_v: Tensor
    g_v: Tensor
    a_v: Tensor
    c_ctx: Tensor
    c_dist: Tensor
    p_copy: Tensor
    o_v: Tensor


def copy_distribution(a_v: Tensor, src_ids: Tensor, vocab_size: int) -> Tensor:
    """Scatter attention mass onto source-token vocabulary entries.

    ``a_v`` is (..., U) attention over source positions, ``src_ids`` the
    matching (..., U) vocabulary ids.  Mass is conserved exactly.
    """
    if a_v.shape != src_ids.shape:
        raise neural.ShapeMismatch(f"attention {tuple(a_v.shape)} vs source ids {tuple(src_ids.shape)}")
    out = a_v.new_zeros(*a_v.shape[:-1], vocab_size)
    out.scatter_add_(-1, src_ids, a_v)
    return out


class NluModel(nn.Module):
    """Fusion + pooling + pointer-generator decoder with an integration mode."""

    def __init__(self, config: NluConfig, vocab: Vocabulary, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.vocab = vocab
        gen = neural.make_generator(config.seed)
        append = config.mode in ("append_fusion", "append_fusion_dec")
        in_dim = config.embed_dim + (1 if append else 0)
        d = config.model_dim
        self.fusion = neural.MultiHeadAttention(
            in_dim, in_dim, in_dim, d, d, config.fusion_heads, gen, dtype
        )
        self.pooling = nn.ModuleList(
            neural.TransformerEncoderLayer(d, config.pooling_heads, config.ff_dim, gen, dtype)
            for _ in range(config.pooling_layers)
        )
        self.tgt_embed = neural.init_embedding_(nn.Embedding(len(vocab), d, dtype=dtype), gen)
        self.decoder = neural.TransformerDecoderLayer(
            d, config.decoder_heads, config.ff_dim, gen, dtype
        )
        self.gen_head = neural.make_linear(d, len(vocab), gen, dtype)
        self.ptr_attn = neural.MultiHeadAttention(d, d, d, d, d, config.pointer_heads, gen, dtype)
        gate_in = 2 * d + (1 if config.mode == "append_fusion_dec" else 0)
        self.copy_gate = neural.make_linear(gate_in, 1, gen, dtype)
        pos = neural.sinusoidal_positions(config.max_decode_len + 2, d, dtype)
        self.register_buffer("tgt_pos", pos)
        self.register_buffer("src_pos", pos.clone())

    # -- encoder side -------------------------------------------------

    def fuse(
        self,
        e_txt: Tensor,
        e_aud: Tensor,
        score: Optional[Tensor] = None,
        aud_mask: Optional[Tensor] = None,
    ) -> Tensor:
        """Cross-attend text (query) over audio (key/value); (…, U, D) out."""
        if e_txt.shape[-1] != self.config.embed_dim or e_aud.shape[-1] != self.config.embed_dim:
            raise neural.ShapeMismatch(
                f"expected embedding dim {self.config.embed_dim}, "
                f"got text {e_txt.shape[-1]} / audio {e_aud.shape[-1]}"
            )
        mode = self.config.mode
        if mode != "baseline":
            if score is None:
                raise MissingScore(f"mode {mode!r} requires a confidence score")
            if mode == "mul_fusion":
                e_txt, e_aud = integrate_mul(e_txt, e_aud, score)
            else:
                e_txt, e_aud = integrate_append_fusion(e_txt, e_aud, score)
        fused, _ = self.fusion(e_txt, e_aud, e_aud, key_mask=aud_mask)
        return fused

    def pool(self, fused: Tensor, src_mask: Optional[Tensor] = None) -> Tensor:
        # positional encodings enter here: fusion emits attention mixtures
        # of (position-free) audio values, so without this the decoder's
        # pointer could address source rows only by content
        fused = fused + self.src_pos[: fused.shape[-2]]
        for layer in self.pooling:
            fused = layer(fused, key_mask=src_mask)
        return fused

    def encode(
        self,
        e_txt: Tensor,
        e_aud: Tensor,
        score: Optional[Tensor] = None,
        src_mask: Optional[Tensor] = None,
        aud_mask: Optional[Tensor] = None,
    ) -> Tensor:
        return self.pool(self.fuse(e_txt, e_aud, score, aud_mask), src_mask)

    # -- decoder side -------------------------------------------------

    def decode_train(
        self,
        pooled: Tensor,
        src_ids: Tensor,
        tgt_in: Tensor,
        score: Optional[Tensor] = None,
        src_mask: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor]:
        """Teacher-forced distributions for every step: (B, V, vocab).

        Returns the output mixture and the copy gate (B, V, 1).
        """
        b, v_len = tgt_in.shape
        y = self.tgt_embed(tgt_in) + self.tgt_pos[:v_len]
        d_v = self.decoder(y, pooled, memory_mask=src_mask)
        g_v = torch.softmax(self.gen_head(d_v), dim=-1)
        c_ctx, a_v = self.ptr_attn(d_v, pooled, pooled, key_mask=src_mask)
        gate_feats = [d_v, c_ctx]
        if self.config.mode == "append_fusion_dec":
            if score is None:
                raise MissingScore("append_fusion_dec requires a score at the copy gate")
            gate_feats.append(score.view(b, 1, 1).expand(b, v_len, 1).to(d_v.dtype))
        p_copy = torch.sigmoid(self.copy_gate(torch.cat(gate_feats, dim=-1)))
        c_dist = copy_distribution(
            a_v, src_ids[:, None, :].expand(b, v_len, src_ids.shape[1]), len(self.vocab)
        )
        o_v = p_copy * c_dist + (1.0 - p_copy) * g_v
        if self.config.renormalize_mixture:
            o_v = torch.softmax(o_v, dim=-1)
        return o_v, p_copy

    def decode_step(
        self,
        prev_targets: Sequence[str],
        pooled: Tensor,
        hyp_words: Sequence[str],
        score: Optional[float] = None,
    ) -> DecodeStep:
        """Single-example step: distributions for the token after ``prev_targets``."""
        if pooled.dim() != 2 or pooled.shape[0] != len(hyp_words):
            raise neural.ShapeMismatch(
                f"pooled rows {tuple(pooled.shape)} must match {len(hyp_words)} source words"
            )
        if self.config.mode == "append_fusion_dec" and score is None:
            raise MissingScore("append_fusion_dec requires a score at the copy gate")
        ids = [self.vocab.bos_id] + self.vocab.encode(prev_targets)
        tgt_in = torch.tensor([ids], dtype=torch.long)
        src_ids = torch.tensor([self.vocab.encode(hyp_words)], dtype=torch.long)
        score_t = None if score is None else torch.tensor([score], dtype=pooled.dtype)

        b, v_len = 1, len(ids)
        y = self.tgt_embed(tgt_in) + self.tgt_pos[:v_len]
        d_all = self.decoder(y, pooled[None], memory_mask=None)
        d_v = d_all[0, -1]
        g_v = torch.softmax(self.gen_head(d_v), dim=-1)
        c_ctx, a_v = self.ptr_attn(d_v[None, None], pooled[None], pooled[None])
        c_ctx, a_v = c_ctx[0, 0], a_v[0, 0]
        gate_feats = [d_v, c_ctx]
        if self.config.mode == "append_fusion_dec":
            gate_feats.append(score_t.to(d_v.dtype))
        p_copy = torch.sigmoid(self.copy_gate(torch.cat(gate_feats, dim=-1)))[0]
        c_dist = copy_distribution(a_v, src_ids[0], len(self.vocab))
        o_v = p_copy * c_dist + (1.0 - p_copy) * g_v
        if self.config.renormalize_mixture:
            o_v = torch.softmax(o_v, dim=-1)
        return DecodeStep(d_v=d_v, g_v=g_v, a_v=a_v, c_ctx=c_ctx, c_dist=c_dist, p_copy=p_copy, o_v=o_v)

    def param_store(self) -> neural.ParamStore:
        config = {"nlu": vars(self.config).copy(), "vocab_hash": neural.config_hash({"tokens": self.vocab.tokens})}
        config["nlu"]["mcat_mode"] = self.config.mode
        return neural.ParamStore(module=self, config=config, seed=self.config.seed)


# ---------------------------------------------------------------------------
# Examples and batching


@dataclass
class NluExample:
    rec_id: str
    label: int
    src_words: tuple[str, ...]
    src_ids: np.ndarray
    e_txt: np.ndarray
    e_aud: np.ndarray
    score: float
    tgt_ids: np.ndarray
    ref_string: str


def make_example(
    rec: SluRecord,
    vocab: Vocabulary,
    variant: str,
    score: float,
    frontend: Optional[FrozenAsrFrontend] = None,
) -> NluExample:
    """Build one training/eval example from a record.

    ``variant`` is ``hyp`` (text side = ASR hypothesis, stored embedding)
    or ``ref`` (text side = reference words, embedded via the frontend).
    """
    if variant == "hyp":
        words = rec.hyp_words
        e_txt = rec.e_txt
    elif variant == "ref":
        if frontend is None:
            raise ValueError("ref variant needs the frontend to embed reference text")
        words = rec.ref_words
        e_txt = frontend.embed_text(rec.ref_words)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    tgt = [vocab.bos_id] + vocab.encode(rec.parse_string.split()) + [vocab.eos_id]
    return NluExample(
        rec_id=rec.id,
        label=rec.label,
        src_words=tuple(words),
        src_ids=np.asarray(vocab.encode(words), dtype=np.int64),
        e_txt=e_txt,
        e_aud=rec.e_aud,
        score=float(score),
        tgt_ids=np.asarray(tgt, dtype=np.int64),
        ref_string=rec.parse_string,
    )


@dataclass
class Batch:
    e_txt: Tensor
    e_aud: Tensor
    src_ids: Tensor
    src_mask: Tensor
    aud_mask: Tensor
    score: Tensor
    tgt_in: Tensor
    tgt_out: Tensor
    tgt_mask: Tensor


def collate(examples: Sequence[NluExample], pad_id: int, dtype: torch.dtype = torch.float32) -> Batch:
    b = len(examples)
    u_max = max(len(ex.src_ids) for ex in examples)
    t_max = max(ex.e_aud.shape[0] for ex in examples)
    v_max = max(len(ex.tgt_ids) for ex in examples)
    d = examples[0].e_txt.shape[1]

    e_txt = np.zeros((b, u_max, d), dtype=np.float32)
    e_aud = np.zeros((b, t_max, d), dtype=np.float32)
    src_ids = np.full((b, u_max), pad_id, dtype=np.int64)
    src_mask = np.zeros((b, u_max), dtype=bool)
    aud_mask = np.zeros((b, t_max), dtype=bool)
    score = np.zeros(b, dtype=np.float32)
    tgt = np.full((b, v_max), pad_id, dtype=np.int64)
    for i, ex in enumerate(examples):
        u, t, v = len(ex.src_ids), ex.e_aud.shape[0], len(ex.tgt_ids)
        e_txt[i, :u] = ex.e_txt
        e_aud[i, :t] = ex.e_aud
        src_ids[i, :u] = ex.src_ids
        src_mask[i, :u] = True
        aud_mask[i, :t] = True
        score[i] = ex.score
        tgt[i, :v] = ex.tgt_ids
    tgt_in = tgt[:, :-1]
    tgt_out = tgt[:, 1:]
    tgt_mask = tgt_out != pad_id
    return Batch(
        e_txt=torch.from_numpy(e_txt).to(dtype),
        e_aud=torch.from_numpy(e_aud).to(dtype),
        src_ids=torch.from_numpy(src_ids),
        src_mask=torch.from_numpy(src_mask),
        aud_mask=torch.from_numpy(aud_mask),
        score=torch.from_numpy(score).to(dtype),
        tgt_in=torch.from_numpy(tgt_in),
        tgt_out=torch.from_numpy(tgt_out),
        tgt_mask=torch.from_numpy(tgt_mask),
    )


def teacher_forced_loss(model: NluModel, batch: Batch) -> Tensor:
    """Mean per-token NLL of the gold targets under the output mixture."""
    pooled = model.encode(batch.e_txt, batch.e_aud, batch.score, batch.src_mask, batch.aud_mask)
    o_v, _ = model.decode_train(pooled, batch.src_ids, batch.tgt_in, batch.score, batch.src_mask)
    picked = o_v.gather(-1, batch.tgt_out[..., None])[..., 0]
    nll = -torch.log(torch.clamp(picked, min=neural.LOG_EPS))
    mask = batch.tgt_mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


# ---------------------------------------------------------------------------
# Training


class EmptyDataset(ValueError):
    """No examples to train on."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def train_nlu(
    model: NluModel,
    train_examples: Sequence[NluExample],
    valid_examples: Sequence[NluExample],
    cfg: TrainConfig,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Minimize teacher-forced NLL with Adam; early-stop on valid loss.

    Deterministic for a fixed seed: shuffling, init, and update order are
    all generator-driven.
    """
    if len(train_examples) == 0:
        raise EmptyDataset("no training examples")
    t0 = time.time()
    params = list(model.parameters())
    state = neural.AdamState()
    result = TrainResult()
    best_loss = float("inf")
    best_state: Optional[dict] = None
    since_best = 0
    pad = model.vocab.pad_id
    order_rng = np.random.default_rng([cfg.seed, 77])

    for epoch in range(cfg.max_epochs):
        order = order_rng.permutation(len(train_examples))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = collate([train_examples[i] for i in idx], pad)
            loss = teacher_forced_loss(model, batch)
            model.zero_grad(set_to_none=True)
            loss.backward()
            neural.adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        valid_loss = evaluate_loss(model, valid_examples, cfg.batch_size) if valid_examples else train_loss
        result.train_losses.append(train_loss)
        result.valid_losses.append(valid_loss)
        if log:
            log(f"epoch {epoch + 1}: train {train_loss:.4f} valid {valid_loss:.4f}")
        if valid_loss < best_loss - 1e-6:
            best_loss = valid_loss
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    result.seconds = time.time() - t0
    return result


@torch.no_grad()
def evaluate_loss(model: NluModel, examples: Sequence[NluExample], batch_size: int = 64) -> float:
    total, count = 0.0, 0
    pad = model.vocab.pad_id
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, pad)
        loss = teacher_forced_loss(model, batch)
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / count


# ---------------------------------------------------------------------------
# Greedy decoding and exact-match evaluation


@torch.no_grad()
def greedy_decode_batch(model: NluModel, examples: Sequence[NluExample], batch_size: int = 128) -> list[str]:
    """Greedy decode each example to a detokenized parse string."""
    out: list[str] = []
    pad = model.vocab.pad_id
    eos = model.vocab.eos_id
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, pad)
        pooled = model.encode(batch.e_txt, batch.e_aud, batch.score, batch.src_mask, batch.aud_mask)
        b = len(chunk)
        ys = torch.full((b, 1), model.vocab.bos_id, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(model.config.max_decode_len):
            o_v, _ = model.decode_train(pooled, batch.src_ids, ys, batch.score, batch.src_mask)
            nxt = o_v[:, -1].argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, pad), nxt)
            ys = torch.cat([ys, nxt[:, None]], dim=1)
            done |= nxt == eos
            if bool(done.all()):
                break
        for row in ys[:, 1:].tolist():
            toks = []
            for tid in row:
                if tid in (eos, pad):
                    break
                toks.append(model.vocab.tokens[tid])
            out.append(" ".join(toks))
    return out


def greedy_decode(model: NluModel, example: NluExample) -> str:
    return greedy_decode_batch(model, [example])[0]


@dataclass
class EmRecord:
    id: str
    label: int
    em: int
    score_used: float


def evaluate_em(model: NluModel, examples: Sequence[NluExample]) -> list[EmRecord]:
    hyps = greedy_decode_batch(model, examples)
    return [
        EmRecord(id=ex.rec_id, label=ex.label, em=int(exact_match(hyp, ex.ref_string)), score_used=ex.score)
        for ex, hyp in zip(examples, hyps)
    ]
