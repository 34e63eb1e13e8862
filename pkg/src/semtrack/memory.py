"""Memory encoder, memory bank and memory cross-attention.

A memory entry fuses frame features with a downsampled mask (``features + conv_down(mask)``).
Target tokens then cross-attend over the concatenated tokens of every stored entry.
Entries carry no temporal or positional code, so the result does not depend on the
order in which references were appended.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import EncoderConfig
from .encoder import FeatureMap
from .errors import ShapeError, StateError
from .layers import MLP, Attention, layer_norm, trunc_normal

ORIGINS = ("reference", "pseudo_reference")


class MaskDownsampler(nn.Module):
    """Bias-free stride-2 3x3 convolutions (GELU between) and a final 1x1 projection to d."""

    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        n_down = config.patch_size.bit_length() - 1
        chans = [1] + [min(4**(i + 1), config.embed_dim) for i in range(n_down)]
        self.convs = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(trunc_normal(tuple(conv.weight.shape), generator, std=(9 * cin) ** -0.5))
            self.convs.append(conv)
        self.proj = nn.Conv2d(chans[-1], config.embed_dim, 1, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(trunc_normal(tuple(self.proj.weight.shape), generator,
                                                std=chans[-1] ** -0.5))

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        """(B, H, W) masks -> (B, h, w, d)."""
        x = masks.unsqueeze(1)
        for conv in self.convs:
            x = F.gelu(conv(x))
        return self.proj(x).permute(0, 2, 3, 1)


class MemoryAttentionLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, generator: torch.Generator):
        super().__init__()
        self.norm_q = layer_norm(dim)
        self.norm_m = layer_norm(dim)
        # float64 reductions over the bank keep outputs stable under reference reordering
        self.cross_attn = Attention(dim, num_heads, generator, accumulate_dtype=torch.float64)
        self.norm_f = layer_norm(dim)
        self.mlp = MLP([dim, 4 * dim, dim], generator)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        m = self.norm_m(memory)
        x = x + self.cross_attn(self.norm_q(x), m, m)
        return x + self.mlp(self.norm_f(x))


class MemoryAttention(nn.Module):
    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(
            MemoryAttentionLayer(config.embed_dim, config.num_heads, generator)
            for _ in range(config.memory_layers))

    def forward(self, target: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """target (B, N, d), memory (B, M, d) -> (B, N, d)."""
        x = target
        for layer in self.layers:
            x = layer(x, memory)
        return x


@dataclass
class MemoryEntry:
    fused: torch.Tensor  # (h, w, d)
    origin: str = "reference"
    frame_id: Optional[str] = None

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")


@dataclass
class MemoryBank:
    entries: list[MemoryEntry] = field(default_factory=list)
    capacity: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    def tokens(self) -> torch.Tensor:
        """Concatenated entry tokens, (sum of h*w over entries, d)."""
        if not self.entries:
            raise StateError("no reference encoded: the memory bank is empty")
        return torch.cat([e.fused.reshape(-1, e.fused.shape[-1]) for e in self.entries], dim=0)


def bank_append(bank: MemoryBank, entry: MemoryEntry) -> None:
    if bank.capacity is not None and len(bank.entries) >= bank.capacity:
        raise StateError(f"memory bank is full (capacity {bank.capacity})")
    bank.entries.append(entry)


def bank_reset(bank: MemoryBank) -> None:
    bank.entries.clear()


def mask_to_tensor(mask, image_size: int, dtype: torch.dtype) -> torch.Tensor:
    t = mask if isinstance(mask, torch.Tensor) else torch.as_tensor(np.asarray(mask))
    if t.dtype == torch.bool:
        t = t.to(dtype)
    t = t.to(dtype)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or tuple(t.shape[1:]) != (image_size, image_size):
        raise ShapeError(f"mask shape {tuple(t.shape)} does not match image resolution {image_size}")
    return t


def encode_memory(features: FeatureMap, mask, downsampler: MaskDownsampler,
                  origin: str = "reference") -> MemoryEntry:
    """Fuse a feature map with a (binary or soft) full-resolution mask."""
    grid = features.grid
    h = grid.shape[0]
    conv_count = len(downsampler.convs)
    m = mask_to_tensor(mask, h * 2**conv_count, grid.dtype)
    fused = grid + downsampler(m)[0]
    return MemoryEntry(fused, origin, features.source_frame_id)


def memory_attention(target: FeatureMap, bank: MemoryBank, weights: MemoryAttention) -> FeatureMap:
    memory = bank.tokens()
    grid = target.grid
    if memory.shape[-1] != grid.shape[-1] or any(e.fused.shape != grid.shape for e in bank.entries):
        raise ShapeError("memory entries and target features have different shapes")
    h, w, d = grid.shape
    out = weights(grid.reshape(1, h * w, d), memory.unsqueeze(0))
    return FeatureMap(out.reshape(h, w, d), target.source_frame_id)
