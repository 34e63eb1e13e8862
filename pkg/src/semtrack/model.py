"""The frozen base model: encoder, memory encoder/attention, prompt encoder and mask decoder."""

from __future__ import annotations

import hashlib
from typing import Optional

import torch
from torch import nn

from .adapters import AdapterSet
from .config import EncoderConfig
from .encoder import Encoder
from .layers import freeze
from .memory import MaskDownsampler, MemoryAttention
from .promptdec import MaskDecoder, PromptEncoder


class SemTrackModel(nn.Module):
    def __init__(self, config: EncoderConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.encoder = Encoder(config, torch.Generator().manual_seed(seed))
        self.mask_downsampler = MaskDownsampler(config, torch.Generator().manual_seed(seed + 1))
        self.memory_attention = MemoryAttention(config, torch.Generator().manual_seed(seed + 2))
        self.prompt_encoder = PromptEncoder(config, torch.Generator().manual_seed(seed + 3))
        self.mask_decoder = MaskDecoder(config, torch.Generator().manual_seed(seed + 4))
        # identifies how the frozen weights were produced; extended by pretraining
        self.base_tag = f"init:{seed}"

    # batched primitives, all on (B, ...) tensors

    def encode(self, images: torch.Tensor, adapters: Optional[AdapterSet] = None) -> torch.Tensor:
        return self.encoder(images, adapters)

    def memory_tokens(self, features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """(B, h, w, d) features + (B, H, W) masks -> (B, h*w, d) fused memory tokens."""
        fused = features + self.mask_downsampler(masks)
        return fused.reshape(fused.shape[0], -1, fused.shape[-1])

    def match(self, features: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        B, h, w, d = features.shape
        return self.memory_attention(features.reshape(B, h * w, d), memory).reshape(B, h, w, d)

    def decode(self, features: torch.Tensor, sparse: Optional[torch.Tensor] = None) -> torch.Tensor:
        dense = self.prompt_encoder.dense_default(features.shape[0])
        return self.mask_decoder(features, sparse, dense, self.prompt_encoder.image_pe())

    def fingerprint(self) -> str:
        payload = f"{self.config.fingerprint()}|{self.base_tag}"
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def init_model(config: EncoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> SemTrackModel:
    """Deterministically initialized base model with every parameter frozen."""
    return freeze(SemTrackModel(config, seed).to(dtype))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
