"""Prompts, prompt encoding and the two-way attention mask decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import PROMPT_KINDS, EncoderConfig
from .encoder import FeatureMap
from .errors import InputError, ShapeError
from .layers import MLP, Attention, layer_norm, trunc_normal
from .memory import MaskDownsampler, mask_to_tensor

MAX_SCRIBBLE_TOKENS = 16
LARGE_LOGIT = 20.0

# rows of PromptEncoder.point_embed
FG, BG, BOX_TL, BOX_BR = range(4)
_LABELS = {"fg": FG, "bg": BG, 1: FG, 0: BG, True: FG, False: BG}


@dataclass(frozen=True)
class Prompt:
    """A reference annotation.

    payload by kind: ``mask`` an (H, W) {0,1} array; ``point`` a list of (x, y, label)
    with label in {"fg", "bg"}; ``box`` (x_min, y_min, x_max, y_max) with inclusive pixel
    coordinates; ``scribble`` a list of (x, y) foreground pixels.
    """

    kind: str
    payload: object

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise InputError(f"unknown prompt kind {self.kind!r}")

    def validate(self, image_size: int) -> None:
        def in_bounds(x, y):
            return 0 <= x < image_size and 0 <= y < image_size

        if self.kind == "mask":
            m = np.asarray(self.payload)
            if m.shape != (image_size, image_size):
                raise ShapeError(f"mask prompt shape {m.shape} != ({image_size}, {image_size})")
            if not np.isin(m, (0, 1)).all():
                raise InputError("mask prompt values must be 0 or 1")
        elif self.kind == "point":
            pts = list(self.payload)
            if not pts:
                raise InputError("point prompt has no points")
            for p in pts:
                x, y, label = p
                if not in_bounds(x, y):
                    raise InputError(f"point ({x}, {y}) outside a {image_size}x{image_size} image")
                if label not in _LABELS:
                    raise InputError(f"point label must be 'fg' or 'bg', got {label!r}")
        elif self.kind == "box":
            x0, y0, x1, y1 = self.payload
            if not (in_bounds(x0, y0) and in_bounds(x1, y1)):
                raise InputError(f"box {self.payload} outside a {image_size}x{image_size} image")
            if x1 < x0 or y1 < y0:
                raise InputError(f"degenerate box {self.payload}")
        else:
            pts = list(self.payload)
            if not pts:
                raise InputError("empty scribble")
            for x, y in pts:
                if not in_bounds(x, y):
                    raise InputError(f"scribble pixel ({x}, {y}) outside the image")


@dataclass
class PromptTokens:
    sparse: torch.Tensor  # (n, d), n may be 0
    dense: Optional[torch.Tensor] = None  # (h, w, d) for mask prompts


@dataclass
class MaskPrediction:
    logits: torch.Tensor  # (H, W)

    @property
    def binary(self) -> torch.Tensor:
        return self.logits > 0

    def numpy(self) -> np.ndarray:
        return self.binary.detach().cpu().numpy()


def prompt_points(prompt: Prompt, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (n, 2) coordinates in [0, 1] and point-type indices for a sparse prompt."""
    s = float(image_size)
    if prompt.kind == "point":
        pts = [(x, y) for x, y, _ in prompt.payload]
        labels = [_LABELS[lab] for _, _, lab in prompt.payload]
        coords = (np.asarray(pts, dtype=np.float64) + 0.5) / s
    elif prompt.kind == "box":
        x0, y0, x1, y1 = prompt.payload
        coords = np.array([[x0, y0], [x1 + 1, y1 + 1]], dtype=np.float64) / s
        labels = [BOX_TL, BOX_BR]
    elif prompt.kind == "scribble":
        pts = np.asarray(list(prompt.payload), dtype=np.float64)
        if len(pts) > MAX_SCRIBBLE_TOKENS:
            idx = np.round(np.linspace(0, len(pts) - 1, MAX_SCRIBBLE_TOKENS)).astype(int)
            pts = pts[idx]
        coords = (pts + 0.5) / s
        labels = [FG] * len(pts)
    else:
        raise InputError("mask prompts have no sparse points")
    return coords, np.asarray(labels, dtype=np.int64)


class PromptEncoder(nn.Module):
    """Random-Fourier positional codes plus learned point-type embeddings; masks go dense."""

    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        d = config.embed_dim
        self.config = config
        self.register_buffer("gaussian", torch.randn((2, d // 2), generator=generator))
        self.point_embed = nn.Parameter(trunc_normal((4, d), generator, std=1.0))
        self.no_mask_embed = nn.Parameter(trunc_normal((d,), generator))
        self.mask_downscaler = MaskDownsampler(config, generator)

    def positional(self, coords: torch.Tensor) -> torch.Tensor:
        """(..., 2) coordinates in [0, 1] -> (..., d)."""
        c = (2 * coords - 1) @ self.gaussian.to(coords.dtype) * (2 * math.pi)
        return torch.cat([torch.sin(c), torch.cos(c)], dim=-1)

    def image_pe(self) -> torch.Tensor:
        g = self.config.grid_size
        dtype = self.point_embed.dtype
        centers = (torch.arange(g, dtype=dtype) + 0.5) / g
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        return self.positional(torch.stack([xx, yy], dim=-1))  # (h, w, d)

    def sparse(self, coords: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """coords (B, n, 2), labels (B, n) -> (B, n, d)."""
        return self.positional(coords) + self.point_embed[labels]

    def dense_default(self, batch: int) -> torch.Tensor:
        g = self.config.grid_size
        return self.no_mask_embed.expand(batch, g, g, -1)


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, generator: torch.Generator):
        super().__init__()
        self.self_attn = Attention(dim, num_heads, generator)
        self.norm1 = layer_norm(dim)
        self.cross_t2i = Attention(dim, num_heads, generator)
        self.norm2 = layer_norm(dim)
        self.mlp = MLP([dim, 4 * dim, dim], generator)
        self.norm3 = layer_norm(dim)
        self.cross_i2t = Attention(dim, num_heads, generator)
        self.norm4 = layer_norm(dim)

    def forward(self, tokens, src, token_pe, src_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + token_pe
        k = src + src_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, src))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + token_pe
        src = self.norm4(src + self.cross_i2t(k, q, tokens))
        return tokens, src


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = layer_norm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MaskDecoder(nn.Module):
    """Two output tokens (object, mask); the mask token's hypernetwork produces the logits."""

    def __init__(self, config: EncoderConfig, generator: torch.Generator):
        super().__init__()
        d = config.embed_dim
        self.config = config
        self.output_tokens = nn.Parameter(trunc_normal((2, d), generator, std=1.0))
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, config.num_heads, generator) for _ in range(config.decoder_blocks))
        self.final_attn = Attention(d, config.num_heads, generator)
        self.norm_final = layer_norm(d)
        c1, c2 = max(d // 4, 1), max(d // 8, 1)
        self.up1 = nn.ConvTranspose2d(d, c1, 2, stride=2)
        self.up_norm = ChannelNorm(c1)
        self.up2 = nn.ConvTranspose2d(c1, c2, 2, stride=2)
        for conv in (self.up1, self.up2):
            with torch.no_grad():
                fan_in = conv.weight.shape[0]
                conv.weight.copy_(trunc_normal(tuple(conv.weight.shape), generator, std=fan_in**-0.5))
                conv.bias.zero_()
        self.hyper = MLP([d, d, d, c2], generator)

    def forward(self, src: torch.Tensor, sparse: Optional[torch.Tensor], dense: torch.Tensor,
                image_pe: torch.Tensor) -> torch.Tensor:
        """src, dense (B, h, w, d); sparse (B, n, d) or None; image_pe (h, w, d) -> logits (B, H, W)."""
        B, h, w, d = src.shape
        tokens = self.output_tokens.unsqueeze(0).expand(B, -1, -1)
        if sparse is not None and sparse.shape[1] > 0:
            tokens = torch.cat([tokens, sparse], dim=1)
        token_pe = tokens
        x = (src + dense).reshape(B, h * w, d)
        pe = image_pe.reshape(1, h * w, d)
        for block in self.blocks:
            tokens, x = block(tokens, x, token_pe, pe)
        tokens = self.norm_final(tokens + self.final_attn(tokens + token_pe, x + pe, x))
        fmap = x.reshape(B, h, w, d).permute(0, 3, 1, 2)
        up = F.gelu(self.up2(F.gelu(self.up_norm(self.up1(fmap)))))
        size = self.config.image_size
        if up.shape[-1] != size:
            up = F.interpolate(up, size=(size, size), mode="bilinear", align_corners=False)
        weights = self.hyper(tokens[:, 1])  # (B, c2)
        return torch.einsum("bc,bchw->bhw", weights, up)


def encode_prompt(prompt: Prompt, prompt_encoder: PromptEncoder) -> PromptTokens:
    cfg = prompt_encoder.config
    prompt.validate(cfg.image_size)
    dtype = prompt_encoder.point_embed.dtype
    d = cfg.embed_dim
    if prompt.kind == "mask":
        m = mask_to_tensor(np.asarray(prompt.payload), cfg.image_size, dtype)
        return PromptTokens(torch.zeros(0, d, dtype=dtype), prompt_encoder.mask_downscaler(m)[0])
    coords, labels = prompt_points(prompt, cfg.image_size)
    sparse = prompt_encoder.sparse(torch.as_tensor(coords, dtype=dtype)[None], torch.as_tensor(labels)[None])
    return PromptTokens(sparse[0])


def decode_mask(features: FeatureMap, prompt_tokens: Optional[PromptTokens], prompt_encoder: PromptEncoder,
                decoder: MaskDecoder) -> MaskPrediction:
    grid = features.grid
    g = prompt_encoder.config.grid_size
    if tuple(grid.shape) != (g, g, prompt_encoder.config.embed_dim):
        raise ShapeError(f"feature grid {tuple(grid.shape)} does not match the decoder configuration")
    sparse = None
    dense = prompt_encoder.dense_default(1)
    if prompt_tokens is not None:
        if prompt_tokens.sparse.shape[0] > 0:
            sparse = prompt_tokens.sparse[None]
        if prompt_tokens.dense is not None:
            dense = prompt_tokens.dense[None]
    logits = decoder(grid[None], sparse, dense, prompt_encoder.image_pe())
    return MaskPrediction(logits[0])


def mask_prediction_from_mask(mask, dtype: torch.dtype = torch.float32) -> MaskPrediction:
    m = torch.as_tensor(np.asarray(mask)).to(dtype)
    return MaskPrediction(torch.where(m > 0, LARGE_LOGIT, -LARGE_LOGIT).to(dtype))


def reference_mask_from_prompt(encoder_features: FeatureMap, prompt: Prompt, prompt_encoder: PromptEncoder,
                               decoder: MaskDecoder) -> MaskPrediction:
    """Mask of the reference frame itself; mask prompts bypass the decoder."""
    prompt.validate(prompt_encoder.config.image_size)
    if prompt.kind == "mask":
        return mask_prediction_from_mask(prompt.payload, encoder_features.grid.dtype)
    return decode_mask(encoder_features, encode_prompt(prompt, prompt_encoder), prompt_encoder, decoder)


def sparse_batch(prompts: Sequence[Prompt], prompt_encoder: PromptEncoder) -> torch.Tensor:
    """Stack same-length sparse prompts into (B, n, d)."""
    dtype = prompt_encoder.point_embed.dtype
    pairs = [prompt_points(p, prompt_encoder.config.image_size) for p in prompts]
    n = {len(c) for c, _ in pairs}
    if len(n) != 1:
        raise ShapeError("sparse_batch needs prompts with equal token counts")
    coords = torch.as_tensor(np.stack([c for c, _ in pairs]), dtype=dtype)
    labels = torch.as_tensor(np.stack([lab for _, lab in pairs]))
    return prompt_encoder.sparse(coords, labels)
