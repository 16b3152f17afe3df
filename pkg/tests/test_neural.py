from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from mcslu import neural
from mcslu.neural import (
    AdamState,
    ConfigHashMismatch,
    DomainError,
    InvalidHeads,
    MultiHeadAttention,
    ParamStore,
    ShapeMismatch,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    adam_step,
    cross_entropy,
    grad_check,
    linear,
    load_checkpoint,
    lstm_forward,
    make_generator,
    make_linear,
    param_count,
    save_checkpoint,
    sigmoid,
    softmax,
    weighted_bce,
)

F64 = torch.float64


# ---------------------------------------------------------------------------
# functional ops


def test_softmax_symmetry():
    out = softmax(torch.tensor([0.0, 0.0]))
    assert torch.allclose(out, torch.tensor([0.5, 0.5]))


def test_sigmoid_at_zero():
    assert sigmoid(torch.tensor(0.0)).item() == pytest.approx(0.5)


def test_linear_identity():
    x = torch.randn(3, 4)
    out = linear(x, torch.eye(4), torch.zeros(4))
    assert torch.equal(out, x)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        linear(torch.randn(2, 3), torch.eye(4), torch.zeros(4))


def test_softmax_rows_sum_to_one():
    x = torch.randn(5, 7)
    assert torch.allclose(softmax(x, -1).sum(-1), torch.ones(5), atol=1e-6)


# ---------------------------------------------------------------------------
# multi-head attention


def _mha(dq=4, dk=4, dv=4, dm=4, do=4, heads=2, seed=0, dtype=torch.float32):
    return MultiHeadAttention(dq, dk, dv, dm, do, heads, make_generator(seed), dtype)


def test_mha_single_key_attention_is_one():
    mha = _mha()
    q = torch.randn(3, 4)
    kv = torch.randn(1, 4)
    _, attn = mha(q, kv, kv)
    assert torch.equal(attn, torch.ones(3, 1))


def test_mha_rows_sum_to_one():
    mha = _mha(heads=2)
    q, kv = torch.randn(5, 4), torch.randn(7, 4)
    _, attn = mha(q, kv, kv)
    assert torch.allclose(attn.sum(-1), torch.ones(5), atol=1e-6)


def test_mha_hand_case_single_head_identity_projections():
    mha = _mha(2, 2, 2, 2, 2, heads=1)
    with torch.no_grad():
        for proj in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            proj.weight.copy_(torch.eye(2))
            proj.bias.zero_()
    q = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    k = torch.tensor([[1.0, 1.0], [2.0, 0.0]])
    expected = torch.softmax(q @ k.T / math.sqrt(2.0), dim=-1)
    ctx, attn = mha(q, k, k)
    assert torch.allclose(attn, expected, atol=1e-6)
    assert torch.allclose(ctx, expected @ k, atol=1e-6)


def test_mha_invalid_heads():
    with pytest.raises(InvalidHeads):
        _mha(dm=5, heads=2)


def test_mha_key_value_length_mismatch():
    mha = _mha()
    with pytest.raises(ShapeMismatch):
        mha(torch.randn(2, 4), torch.randn(3, 4), torch.randn(4, 4))


def test_mha_key_mask_zeroes_masked_positions():
    mha = _mha()
    q = torch.randn(1, 3, 4)
    kv = torch.randn(1, 5, 4)
    mask = torch.tensor([[True, True, False, True, False]])
    _, attn = mha(q, kv, kv, key_mask=mask)
    assert torch.all(attn[0][:, ~mask[0]] == 0)
    assert torch.allclose(attn.sum(-1), torch.ones(1, 3), atol=1e-6)


# ---------------------------------------------------------------------------
# LSTM


def test_lstm_zero_input_zero_bias_gives_zero_output():
    lstm = torch.nn.LSTM(3, 5, batch_first=True)
    with torch.no_grad():
        lstm.bias_ih_l0.zero_()
        lstm.bias_hh_l0.zero_()
    out = lstm_forward(torch.zeros(4, 3), lstm)
    assert torch.equal(out, torch.zeros(4, 5))


def test_lstm_causality():
    gen = make_generator(3)
    lstm = neural.init_lstm_(torch.nn.LSTM(3, 5, batch_first=True), gen)
    x = torch.randn(6, 3, generator=gen)
    out1 = lstm_forward(x, lstm)
    x2 = x.clone()
    x2[4:] = 0.0
    out2 = lstm_forward(x2, lstm)
    assert torch.allclose(out1[:4], out2[:4])


def test_lstm_input_dim_mismatch():
    lstm = torch.nn.LSTM(3, 5, batch_first=True)
    with pytest.raises(ShapeMismatch):
        lstm_forward(torch.zeros(4, 2), lstm)


# ---------------------------------------------------------------------------
# transformer layers


def test_encoder_layer_preserves_shape():
    layer = TransformerEncoderLayer(8, 2, 16, make_generator(0))
    x = torch.randn(2, 5, 8)
    assert layer(x).shape == (2, 5, 8)


def test_decoder_layer_causal_mask():
    layer = TransformerDecoderLayer(8, 2, 16, make_generator(1))
    memory = torch.randn(1, 4, 8)
    y = torch.randn(1, 5, 8)
    out1 = layer(y, memory)
    y2 = y.clone()
    y2[0, 3:] = torch.randn(2, 8)
    out2 = layer(y2, memory)
    assert torch.allclose(out1[0, :3], out2[0, :3], atol=1e-6)


def test_decoder_layer_uniform_cross_attention_is_permutation_invariant():
    layer = TransformerDecoderLayer(8, 2, 16, make_generator(2))
    with torch.no_grad():
        layer.cross_attn.k_proj.weight.zero_()
        layer.cross_attn.k_proj.bias.zero_()
    y = torch.randn(1, 3, 8)
    memory = torch.randn(1, 6, 8)
    out1 = layer(y, memory)
    out2 = layer(y, memory[:, torch.randperm(6, generator=make_generator(5))])
    assert torch.allclose(out1, out2, atol=1e-6)


# ---------------------------------------------------------------------------
# losses


def test_weighted_bce_confident_correct_is_near_zero():
    p = torch.tensor([1.0 - 1e-9], dtype=F64)
    assert weighted_bce(p, torch.tensor([1.0], dtype=F64), 0.3, 0.7).item() < 1e-6


def test_weighted_bce_class_weights_at_half():
    p = torch.tensor([0.5])
    one = weighted_bce(p, torch.tensor([1.0]), 0.3, 0.7).item()
    zero = weighted_bce(p, torch.tensor([0.0]), 0.3, 0.7).item()
    assert one == pytest.approx(0.3 * math.log(2), rel=1e-6)
    assert zero == pytest.approx(0.7 * math.log(2), rel=1e-6)


def test_weighted_bce_equal_weights_is_plain_bce():
    gen = make_generator(7)
    p = torch.rand(16, generator=gen) * 0.98 + 0.01
    y = (torch.rand(16, generator=gen) > 0.5).float()
    ours = weighted_bce(p, y, 1.0, 1.0)
    ref = torch.nn.functional.binary_cross_entropy(p, y)
    assert torch.allclose(ours, ref, atol=1e-6)


def test_weighted_bce_domain_error():
    with pytest.raises(DomainError):
        weighted_bce(torch.tensor([1.0]), torch.tensor([1.0]), 0.3, 0.7)
    with pytest.raises(DomainError):
        weighted_bce(torch.tensor([0.0]), torch.tensor([0.0]), 0.3, 0.7)


def test_cross_entropy_one_hot_is_zero():
    dist = torch.tensor([0.0, 1.0, 0.0])
    assert cross_entropy(dist, 1).item() == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_uniform_is_log_v():
    v = 7
    dist = torch.full((v,), 1.0 / v)
    assert cross_entropy(dist, 3).item() == pytest.approx(math.log(v), rel=1e-6)


def test_cross_entropy_bad_target():
    with pytest.raises(DomainError):
        cross_entropy(torch.tensor([0.5, 0.5]), 2)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grads_leave_params_unchanged():
    params = [torch.randn(3, 3), torch.randn(2)]
    before = [p.clone() for p in params]
    state = AdamState()
    adam_step(params, [torch.zeros_like(p) for p in params], state)
    for p, b in zip(params, before):
        assert torch.equal(p, b)


def test_adam_minimizes_quadratic():
    x = torch.tensor([5.0, -3.0], requires_grad=True)
    state = AdamState()
    for _ in range(2000):
        loss = (x**2).sum()
        (g,) = torch.autograd.grad(loss, [x])
        adam_step([x], [g], state, lr=1e-2)
    assert torch.all(x.abs() < 1e-3)


def test_adam_first_step_size_is_lr():
    # bias correction makes the first step ~lr * sign(grad)
    x = torch.tensor([1.0])
    state = AdamState()
    adam_step([x], [torch.tensor([0.5])], state, lr=1e-3)
    assert x.item() == pytest.approx(1.0 - 1e-3, rel=1e-4)


# ---------------------------------------------------------------------------
# gradient checker


def test_grad_check_quadratic_is_exact():
    gen = make_generator(11)
    x = (torch.rand(6, generator=gen, dtype=F64) + 0.5).requires_grad_(True)

    def fn():
        return (x * x).sum()

    report = grad_check(fn, [("x", x)], tol=1e-8, coords_per_param=6)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_grad_check_rejects_float32():
    x = torch.randn(3)
    with pytest.raises(DomainError):
        grad_check(lambda: (x * x).sum(), [("x", x)])


def test_grad_check_catches_wrong_gradient():
    x = torch.randn(4, dtype=F64).requires_grad_(True)
    # detached cube term makes autograd see x^2 only: gradients disagree
    def fn():
        return (x * x).sum() + (x.detach() ** 3).sum() * 0 + (x * x.detach() * x.detach()).sum()

    report = grad_check(fn, [("x", x)], tol=1e-4, coords_per_param=4)
    assert not report.passed


# ---------------------------------------------------------------------------
# parameters and checkpoints


def test_param_count_linear():
    layer = make_linear(4, 3, make_generator(0), torch.float32)
    assert param_count(layer) == 4 * 3 + 3


def test_init_is_seed_deterministic():
    a = make_linear(8, 8, make_generator(5), torch.float32)
    b = make_linear(8, 8, make_generator(5), torch.float32)
    assert torch.equal(a.weight, b.weight)
    assert torch.equal(a.bias, b.bias)


def test_init_respects_fan_in_bound():
    layer = make_linear(64, 16, make_generator(1), torch.float32)
    assert layer.weight.abs().max().item() <= 1 / math.sqrt(64)


def test_checkpoint_roundtrip(tmp_path):
    model = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Linear(8, 2))
    store = ParamStore(module=model, config={"arch": "tiny", "dim": 4}, seed=3)
    save_checkpoint(tmp_path / "ckpt", store)

    other = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Linear(8, 2))
    load_checkpoint(tmp_path / "ckpt", ParamStore(other, {"arch": "tiny", "dim": 4}, seed=3))
    for a, b in zip(model.parameters(), other.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_config_hash_mismatch(tmp_path):
    model = torch.nn.Linear(2, 2)
    save_checkpoint(tmp_path / "ckpt", ParamStore(model, {"dim": 2}, seed=0))
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "ckpt", ParamStore(model, {"dim": 3}, seed=0))


def test_checkpoint_blob_is_little_endian_float32(tmp_path):
    model = torch.nn.Linear(2, 1)
    with torch.no_grad():
        model.weight.copy_(torch.tensor([[1.5, -2.0]]))
        model.bias.copy_(torch.tensor([0.25]))
    save_checkpoint(tmp_path / "ckpt", ParamStore(model, {}, seed=0))
    blob = np.frombuffer((tmp_path / "ckpt" / "params.bin").read_bytes(), dtype="<f4")
    assert blob.tolist() == [1.5, -2.0, 0.25]


def test_sinusoidal_positions_shape_and_range():
    table = neural.sinusoidal_positions(10, 8)
    assert table.shape == (10, 8)
    assert table.abs().max() <= 1.0
    assert not torch.equal(table[0], table[1])
