"""Small transformer building blocks shared by the encoder, memory attention and decoder."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

INIT_STD = 0.02


def trunc_normal(shape: tuple[int, ...], generator: torch.Generator, std: float = INIT_STD) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)
    return t


def multi_head_attention(
    q_in: torch.Tensor,
    k_in: torch.Tensor,
    v_in: torch.Tensor,
    W_q: torch.Tensor,
    W_k: torch.Tensor,
    W_v: torch.Tensor,
    W_o: torch.Tensor,
    num_heads: int,
    q_extra: Optional[torch.Tensor] = None,
    v_extra: Optional[torch.Tensor] = None,
    return_weights: bool = False,
    accumulate_dtype: Optional[torch.dtype] = None,
):
    """Scaled dot-product attention over (B, N, d) inputs with row-vector projections (x @ W).

    ``q_extra`` / ``v_extra`` are added to the projected queries / values (LoRA updates).
    ``accumulate_dtype`` runs the reductions over keys in that dtype; with many keys this keeps
    the result nearly independent of key order.
    """
    q = q_in @ W_q
    k = k_in @ W_k
    v = v_in @ W_v
    if q_extra is not None:
        q = q + q_extra
    if v_extra is not None:
        v = v + v_extra
    B, Nq, d = q.shape
    Nk = k.shape[1]
    hd = d // num_heads
    q = q.view(B, Nq, num_heads, hd).transpose(1, 2)
    k = k.view(B, Nk, num_heads, hd).transpose(1, 2)
    v = v.view(B, Nk, num_heads, hd).transpose(1, 2)
    dtype = q.dtype
    if accumulate_dtype is not None:
        q, k, v = q.to(accumulate_dtype), k.to(accumulate_dtype), v.to(accumulate_dtype)
    if not return_weights:
        out = F.scaled_dot_product_attention(q, k, v).to(dtype)
        return out.transpose(1, 2).reshape(B, Nq, d) @ W_o
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (weights @ v).to(dtype).transpose(1, 2).reshape(B, Nq, d) @ W_o
    return out, weights.to(dtype)


class Attention(nn.Module):
    """Bias-free multi-head attention with d x d projections."""

    def __init__(self, dim: int, num_heads: int, generator: torch.Generator,
                 accumulate_dtype: Optional[torch.dtype] = None):
        super().__init__()
        self.num_heads = num_heads
        self.accumulate_dtype = accumulate_dtype
        self.W_q = nn.Parameter(trunc_normal((dim, dim), generator))
        self.W_k = nn.Parameter(trunc_normal((dim, dim), generator))
        self.W_v = nn.Parameter(trunc_normal((dim, dim), generator))
        self.W_o = nn.Parameter(trunc_normal((dim, dim), generator))

    def forward(self, q_in, k_in, v_in, q_extra=None, v_extra=None, return_weights=False):
        return multi_head_attention(q_in, k_in, v_in, self.W_q, self.W_k, self.W_v, self.W_o,
                                    self.num_heads, q_extra, v_extra, return_weights, self.accumulate_dtype)


class MLP(nn.Module):
    def __init__(self, dims: list[int], generator: torch.Generator, final_activation: bool = False):
        super().__init__()
        self.layers = nn.ModuleList()
        for a, b in zip(dims[:-1], dims[1:]):
            lin = nn.Linear(a, b)
            with torch.no_grad():
                lin.weight.copy_(trunc_normal((b, a), generator))
                lin.bias.zero_()
            self.layers.append(lin)
        self.final_activation = final_activation

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = F.gelu(x)
        return x


def layer_norm(dim: int) -> nn.LayerNorm:
    return nn.LayerNorm(dim, eps=1e-6)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()
