"""Differentiable building blocks shared by the NLU and the score encoder.

Thin, shape-checked layers built from torch primitives: a multi-head
attention whose returned weights are averaged over heads, post-norm
transformer encoder/decoder layers, an LSTM wrapper, the two loss
functions, a functional Adam step, a finite-difference gradient checker,
and a manifest+blob checkpoint format.

All parameters are initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
from an explicit torch.Generator, so models are reproducible bit-for-bit
from their config seed.  Training runs in float32; gradient checks build
float64 models.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

LOG_EPS = 1e-12


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible with the operation."""


class InvalidHeads(ValueError):
    """Model width is not divisible by the head count."""


class DomainError(ValueError):
    """A probability argument left its valid domain."""


class ConfigHashMismatch(RuntimeError):
    """Checkpoint was written under a different configuration."""


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def uniform_init_(tensor: Tensor, fan_in: int, gen: torch.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)
    return tensor


def make_linear(d_in: int, d_out: int, gen: torch.Generator, dtype: torch.dtype) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=dtype)
    uniform_init_(layer.weight, d_in, gen)
    uniform_init_(layer.bias, d_in, gen)
    return layer


def init_embedding_(emb: nn.Embedding, gen: torch.Generator) -> nn.Embedding:
    uniform_init_(emb.weight, emb.embedding_dim, gen)
    return emb


def init_lstm_(lstm: nn.LSTM, gen: torch.Generator) -> nn.LSTM:
    for name, param in lstm.named_parameters():
        fan_in = param.shape[-1] if "weight" in name else lstm.hidden_size
        uniform_init_(param, fan_in, gen)
    return lstm


# ---------------------------------------------------------------------------
# Functional ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} vs weight in-dim {weight.shape[1]}")
    if bias.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: bias dim {bias.shape[-1]} vs weight out-dim {weight.shape[0]}")
    return x @ weight.T + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), (2 * (idx // 2)) / dim)
    table = torch.where(idx % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(dtype)


# ---------------------------------------------------------------------------
# Attention and transformer layers


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v input widths.

    Returns the attended context and the attention matrix averaged over
    heads (a single attention object is what the copy mechanism reads).
    A boolean ``key_mask`` marks valid key positions.
    """

    def __init__(
        self,
        query_dim: int,
        key_dim: int,
        value_dim: int,
        model_dim: int,
        out_dim: int,
        n_heads: int,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if model_dim % n_heads != 0:
            raise InvalidHeads(f"model_dim {model_dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.q_proj = make_linear(query_dim, model_dim, gen, dtype)
        self.k_proj = make_linear(key_dim, model_dim, gen, dtype)
        self.v_proj = make_linear(value_dim, model_dim, gen, dtype)
        self.out_proj = make_linear(model_dim, out_dim, gen, dtype)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Optional[Tensor] = None,
        attn_bias: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor]:
        squeeze = query.dim() == 2
        if squeeze:
            query, key, value = query[None], key[None], value[None]
            if key_mask is not None:
                key_mask = key_mask[None]
        if key.shape[-2] != value.shape[-2]:
            raise ShapeMismatch(f"key length {key.shape[-2]} vs value length {value.shape[-2]}")
        b, q_len, _ = query.shape
        t_len = key.shape[1]
        h, hd = self.n_heads, self.head_dim

        q = self.q_proj(query).view(b, q_len, h, hd).transpose(1, 2)
        k = self.k_proj(key).view(b, t_len, h, hd).transpose(1, 2)
        v = self.v_proj(value).view(b, t_len, h, hd).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if attn_bias is not None:
            logits = logits + attn_bias
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        context = (weights @ v).transpose(1, 2).reshape(b, q_len, h * hd)
        context = self.out_proj(context)
        attn = weights.mean(dim=1)
        if squeeze:
            return context[0], attn[0]
        return context, attn


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.lin1 = make_linear(dim, hidden, gen, dtype)
        self.lin2 = make_linear(hidden, dim, gen, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(torch.relu(self.lin1(x)))


class TransformerEncoderLayer(nn.Module):
    """Post-norm self-attention block: LN(x + attn), then LN(x + FF)."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, gen: torch.Generator,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, dim, dim, dim, dim, n_heads, gen, dtype)
        self.ff = FeedForward(dim, ff_dim, gen, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        attn_out, _ = self.self_attn(x, x, x, key_mask=key_mask)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ff(x))


def causal_bias(length: int, dtype: torch.dtype) -> Tensor:
    """Additive attention bias that hides future positions."""
    mask = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
    bias = torch.zeros(length, length, dtype=dtype)
    return bias.masked_fill(mask, float("-inf"))


class TransformerDecoderLayer(nn.Module):
    """Post-norm decoder block: causal self-attention, cross-attention
    over the encoder memory, and a feed-forward sublayer."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, gen: torch.Generator,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, dim, dim, dim, dim, n_heads, gen, dtype)
        self.cross_attn = MultiHeadAttention(dim, dim, dim, dim, dim, n_heads, gen, dtype)
        self.ff = FeedForward(dim, ff_dim, gen, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.norm3 = nn.LayerNorm(dim, dtype=dtype)

    def forward(self, y: Tensor, memory: Tensor, memory_mask: Optional[Tensor] = None) -> Tensor:
        v_len = y.shape[-2]
        self_out, _ = self.self_attn(y, y, y, attn_bias=causal_bias(v_len, y.dtype))
        y = self.norm1(y + self_out)
        cross_out, _ = self.cross_attn(y, memory, memory, key_mask=memory_mask)
        y = self.norm2(y + cross_out)
        return self.norm3(y + self.ff(y))


def lstm_forward(seq: Tensor, lstm: nn.LSTM) -> Tensor:
    """Run an LSTM from a zero initial state over (L, D) or (B, L, D)."""
    if seq.shape[-1] != lstm.input_size:
        raise ShapeMismatch(f"lstm: input dim {seq.shape[-1]} vs expected {lstm.input_size}")
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq[None]
    out, _ = lstm(seq)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Losses


def weighted_bce(p: Tensor, label: Tensor, w1: float, w0: float) -> Tensor:
    """Class-weighted binary cross-entropy on probabilities (not logits)."""
    if torch.any((p <= 0) | (p >= 1)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    label = label.to(p.dtype)
    loss = -(
        w1 * label * torch.log(torch.clamp(p, min=LOG_EPS))
        + w0 * (1 - label) * torch.log(torch.clamp(1 - p, min=LOG_EPS))
    )
    return loss.mean()


def cross_entropy(dist: Tensor, target: Tensor | int) -> Tensor:
    """NLL of target indices under already-normalized distributions."""
    if isinstance(target, int):
        target = torch.tensor([target])
        dist = dist[None]
    if target.max() >= dist.shape[-1] or target.min() < 0:
        raise DomainError("target index outside the distribution support")
    picked = dist.gather(-1, target[..., None])[..., 0]
    return -torch.log(torch.clamp(picked, min=LOG_EPS)).mean()


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[Tensor]],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Sequence[Tensor]:
    """One Adam update with bias correction, applied in place."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return params


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    tol: float = 1e-4,
    h: float = 1e-5,
    coords_per_param: int = 8,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Probes up to ``coords_per_param`` random coordinates per tensor (all
    coordinates for small tensors).  Relative error uses a denominator
    floor of 1e-4, so near-zero gradient pairs are compared absolutely.
    Run on float64 parameters; float32 finite differences are meaningless
    at h=1e-5.
    """
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    for name, p in params:
        if p.dtype != torch.float64:
            raise DomainError(f"grad_check requires float64 params; {name} is {p.dtype}")
        p.requires_grad_(True)
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    n_coords = 0
    for name, p, a in zip(names, tensors, analytic):
        flat = p.detach().reshape(-1)
        total = flat.numel()
        if total <= coords_per_param:
            coords = np.arange(total)
        else:
            coords = rng.choice(total, size=coords_per_param, replace=False)
        worst = 0.0
        a_flat = None if a is None else a.reshape(-1)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + h
            up = fn().item()
            with torch.no_grad():
                flat[c] = orig - h
            down = fn().item()
            with torch.no_grad():
                flat[c] = orig
            numeric = (up - down) / (2 * h)
            analytic_c = 0.0 if a_flat is None else a_flat[c].item()
            denom = max(abs(analytic_c), abs(numeric), 1e-4)
            worst = max(worst, abs(analytic_c - numeric) / denom)
            n_coords += 1
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, n_coords=n_coords, per_param=per_param, tol=tol)


# ---------------------------------------------------------------------------
# Parameter accounting and checkpoints


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ParamStore:
    """Named view of a module's parameters with its init provenance,
    the unit the checkpoint format serializes."""

    module: nn.Module
    config: dict
    seed: int

    @property
    def count(self) -> int:
        return param_count(self.module)

    def entries(self) -> list[tuple[str, Tensor]]:
        return list(self.module.named_parameters())


def save_checkpoint(path: str | Path, store: ParamStore) -> None:
    """Write manifest.json plus a little-endian float32 blob."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": "mcslu-checkpoint",
        "version": 1,
        "seed": store.seed,
        "config": store.config,
        "config_hash": config_hash(store.config),
        "params": [],
    }
    offset = 0
    blobs: list[bytes] = []
    for name, tensor in store.entries():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        manifest["params"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "params.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path, store: ParamStore) -> None:
    """Restore parameters in place; the stored config hash must match."""
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text())
    expected = config_hash(store.config)
    if manifest["config_hash"] != expected:
        raise ConfigHashMismatch(
            f"checkpoint config hash {manifest['config_hash'][:12]} != expected {expected[:12]}"
        )
    data = (src / "params.bin").read_bytes()
    by_name = dict(store.entries())
    for entry in manifest["params"]:
        tensor = by_name[entry["name"]]
        arr = np.frombuffer(
            data, dtype="<f4", count=entry["numel"], offset=entry["offset"]
        ).reshape(entry["shape"])
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
