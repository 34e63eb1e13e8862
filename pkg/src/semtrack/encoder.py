"""A small pre-norm transformer image encoder with adapter insertion points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .adapters import AdapterSet, AdapterWeights
from .config import EncoderConfig
from .errors import InputError, ShapeError
from .layers import MLP, Attention, freeze, layer_norm, trunc_normal


@dataclass
class FeatureMap:
    grid: torch.Tensor  # (h, w, d)
    source_frame_id: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.grid.shape)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, generator: torch.Generator):
        super().__init__()
        self.norm1 = layer_norm(dim)
        self.attn = Attention(dim, num_heads, generator)
        self.norm2 = layer_norm(dim)
        self.mlp = MLP([dim, dim * mlp_ratio, dim], generator)

    def forward(self, x: torch.Tensor, adapters: Optional[dict[Optional[str], AdapterWeights]] = None):
        adapters = adapters or {}
        h = self.norm1(x)
        q_extra = adapters["q"](h) if "q" in adapters else None
        v_extra = adapters["v"](h) if "v" in adapters else None
        x_self = x + self.attn(h, h, h, q_extra=q_extra, v_extra=v_extra)
        out = self.mlp(self.norm2(x_self)) + x_self
        adapter = adapters.get(None)
        if adapter is None:
            return out
        if adapter.kind == "serial_adapter":
            return out + adapter(out)
        # parallel branch on the attention output
        return out + adapter(x_self)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        self.config = config
        d, p = config.embed_dim, config.patch_size
        self.patch_weight = nn.Parameter(trunc_normal((p * p * 3, d), generator))
        self.patch_bias = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(trunc_normal((config.num_tokens, d), generator))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio, generator) for _ in range(config.num_blocks))

    @property
    def first_adapted(self) -> int:
        return min(self.config.adapted_layers, default=self.config.num_blocks)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) -> (B, N, p*p*3), each row ordered (row-in-patch, col-in-patch, channel)."""
        B, H, W, C = images.shape
        p = self.config.patch_size
        g = H // p
        x = images.reshape(B, g, p, g, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * C)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.patchify(images) @ self.patch_weight + self.patch_bias + self.pos_embed

    def forward_prefix(self, images: torch.Tensor) -> torch.Tensor:
        """Tokens after the blocks preceding the first adapted layer (independent of adapters)."""
        x = self.embed(images)
        for block in self.blocks[: self.first_adapted]:
            x = block(x)
        return x

    def forward_suffix(self, tokens: torch.Tensor, adapters: Optional[AdapterSet] = None) -> torch.Tensor:
        x = tokens
        for i in range(self.first_adapted, len(self.blocks)):
            x = self.blocks[i](x, adapters.for_layer(i) if adapters is not None else None)
        g = self.config.grid_size
        return x.reshape(x.shape[0], g, g, -1)

    def forward(self, images: torch.Tensor, adapters: Optional[AdapterSet] = None) -> torch.Tensor:
        """(B, H, W, 3) float images -> (B, h, w, d) features."""
        return self.forward_suffix(self.forward_prefix(images), adapters)


def init_encoder(config: EncoderConfig, seed: int) -> Encoder:
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    return freeze(Encoder(config, gen))


def image_to_tensor(image, config: EncoderConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert an (H, W, 3) or (B, H, W, 3) uint8/float pixel array to a batched float tensor.

    uint8 pixels are scaled to [0, 1]; float input is taken as already in that range.
    Both are then centred to [-0.5, 0.5].
    """
    is_uint8 = (isinstance(image, np.ndarray) and image.dtype == np.uint8) or (
        isinstance(image, torch.Tensor) and image.dtype == torch.uint8)
    t = torch.as_tensor(np.array(image) if not isinstance(image, torch.Tensor) else image)
    t = t.to(dtype)
    if is_uint8:
        t = t / 255.0
    if t.ndim == 3:
        t = t.unsqueeze(0)
    s = config.image_size
    if t.ndim != 4 or tuple(t.shape[1:]) != (s, s, 3):
        raise ShapeError(f"expected image of shape ({s}, {s}, 3), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise InputError("image contains non-finite pixels")
    return t - 0.5


def encode_image(encoder: Encoder, image, adapters: Optional[AdapterSet] = None,
                 frame_id: Optional[str] = None) -> FeatureMap:
    dtype = encoder.patch_weight.dtype
    x = image_to_tensor(image, encoder.config, dtype)
    if x.shape[0] != 1:
        raise ShapeError("encode_image takes a single image; use Encoder.forward for batches")
    return FeatureMap(encoder(x, adapters)[0], frame_id)
