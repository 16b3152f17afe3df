"""Finite-difference verification for every layer and both full models.

Everything runs in float64 on miniature shapes; the analytic side comes
from autograd, the numeric side from central differences.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .. import neural, scoreenc
from ..deliberation import NluConfig, NluModel, Vocabulary, collate, make_example, teacher_forced_loss
from ..simasr import FrozenAsrFrontend, SimConfig, default_grammar, gen_corpus, make_record

F64 = torch.float64


def _gen(seed: int = 0) -> torch.Generator:
    return neural.make_generator(seed)


def check_linear() -> neural.GradCheckReport:
    gen = _gen(1)
    layer = neural.make_linear(5, 3, gen, F64)
    x = torch.randn(4, 5, generator=gen, dtype=F64)

    def fn() -> torch.Tensor:
        return neural.linear(x, layer.weight, layer.bias).pow(2).sum()

    return neural.grad_check(fn, list(layer.named_parameters()), coords_per_param=12)


def check_mha() -> neural.GradCheckReport:
    gen = _gen(2)
    mha = neural.MultiHeadAttention(6, 6, 6, 8, 6, 2, gen, F64)
    q = torch.randn(3, 6, generator=gen, dtype=F64)
    kv = torch.randn(5, 6, generator=gen, dtype=F64)

    def fn() -> torch.Tensor:
        ctx, attn = mha(q, kv, kv)
        return ctx.pow(2).sum() + attn.pow(2).sum()

    return neural.grad_check(fn, list(mha.named_parameters()), coords_per_param=10)


def check_lstm() -> neural.GradCheckReport:
    gen = _gen(3)
    lstm = neural.init_lstm_(torch.nn.LSTM(4, 6, batch_first=True, dtype=F64), gen)
    x = torch.randn(5, 4, generator=gen, dtype=F64)

    def fn() -> torch.Tensor:
        return neural.lstm_forward(x, lstm).pow(2).sum()

    return neural.grad_check(fn, list(lstm.named_parameters()), coords_per_param=10)


def check_encoder_layer() -> neural.GradCheckReport:
    gen = _gen(4)
    layer = neural.TransformerEncoderLayer(8, 2, 16, gen, F64)
    x = torch.randn(1, 4, 8, generator=gen, dtype=F64)

    def fn() -> torch.Tensor:
        return layer(x).pow(2).sum()

    return neural.grad_check(fn, list(layer.named_parameters()), coords_per_param=8)


def check_decoder_layer() -> neural.GradCheckReport:
    gen = _gen(5)
    layer = neural.TransformerDecoderLayer(8, 2, 16, gen, F64)
    y = torch.randn(1, 4, 8, generator=gen, dtype=F64)
    memory = torch.randn(1, 6, 8, generator=gen, dtype=F64)

    def fn() -> torch.Tensor:
        return layer(y, memory).pow(2).sum()

    return neural.grad_check(fn, list(layer.named_parameters()), coords_per_param=8)


def check_weighted_bce() -> neural.GradCheckReport:
    gen = _gen(6)
    head = neural.make_linear(4, 1, gen, F64)
    x = torch.randn(8, 4, generator=gen, dtype=F64)
    labels = torch.tensor([1, 0, 1, 1, 0, 0, 1, 0], dtype=F64)

    def fn() -> torch.Tensor:
        p = torch.sigmoid(head(x))[:, 0]
        return neural.weighted_bce(p, labels, w1=0.3, w0=0.7)

    return neural.grad_check(fn, list(head.named_parameters()), coords_per_param=5)


def check_cross_entropy() -> neural.GradCheckReport:
    gen = _gen(7)
    head = neural.make_linear(4, 6, gen, F64)
    x = torch.randn(5, 4, generator=gen, dtype=F64)
    target = torch.tensor([0, 3, 5, 1, 2])

    def fn() -> torch.Tensor:
        dist = torch.softmax(head(x), dim=-1)
        return neural.cross_entropy(dist, target)

    return neural.grad_check(fn, list(head.named_parameters()), coords_per_param=6)


def _tiny_records(n: int = 3, sigma_aud: float = 0.5):
    sim = SimConfig(p_sub=0.3, p_del=0.05, p_ins=0.05, embed_dim=8,
                    frames_per_word=(1, 2), sigma_aud=sigma_aud, seed=11)
    grammar = default_grammar()
    frontend = FrozenAsrFrontend(grammar.word_vocabulary(), sim)
    utts = gen_corpus(grammar, n, seed=11)
    records = [make_record(u, frontend, sim, i) for i, u in enumerate(utts)]
    return records, grammar, frontend


def nlu_loss_check(mode: str = "append_fusion_dec") -> neural.GradCheckReport:
    """Full teacher-forced NLU loss on one tiny batch, float64."""
    records, grammar, frontend = _tiny_records()
    vocab = Vocabulary(grammar.word_vocabulary(), grammar.ontology_symbols())
    cfg = NluConfig(embed_dim=8, model_dim=8, fusion_heads=2, pooling_layers=1,
                    pooling_heads=2, decoder_heads=2, ff_dim=12, mode=mode, seed=13)
    model = NluModel(cfg, vocab, dtype=F64)
    examples = [make_example(r, vocab, "hyp", 0.5 * (i + 1) / len(records))
                for i, r in enumerate(records)]
    batch = collate(examples, vocab.pad_id, dtype=F64)

    def fn() -> torch.Tensor:
        return teacher_forced_loss(model, batch)

    return neural.grad_check(fn, list(model.named_parameters()), coords_per_param=4)


def score_encoder_loss_check() -> neural.GradCheckReport:
    """Weighted-BCE score-encoder objective on a tiny batch, float64."""
    records, _, _ = _tiny_records(4)
    cfg = scoreenc.ScoreEncoderConfig(embed_dim=8, hidden_dim=6, heads=2, seed=17)
    model = scoreenc.ScoreEncoder(cfg, dtype=F64)
    batch = scoreenc.collate_records(records, dtype=F64)

    def fn() -> torch.Tensor:
        p = model(batch.hyp_logprob, batch.e_txt, batch.e_aud, batch.txt_mask, batch.aud_mask)
        return neural.weighted_bce(p, batch.label.to(F64), w1=0.3, w0=0.7)

    return neural.grad_check(fn, list(model.named_parameters()), coords_per_param=4)


def full_suite() -> list[tuple[str, neural.GradCheckReport]]:
    return [
        ("linear", check_linear()),
        ("multi_head_attention", check_mha()),
        ("lstm", check_lstm()),
        ("transformer_encoder_layer", check_encoder_layer()),
        ("transformer_decoder_layer", check_decoder_layer()),
        ("weighted_bce", check_weighted_bce()),
        ("cross_entropy", check_cross_entropy()),
        ("nlu_loss_baseline", nlu_loss_check("baseline")),
        ("nlu_loss_mul_fusion", nlu_loss_check("mul_fusion")),
        ("nlu_loss_append_fusion_dec", nlu_loss_check("append_fusion_dec")),
        ("score_encoder_loss", score_encoder_loss_check()),
    ]
