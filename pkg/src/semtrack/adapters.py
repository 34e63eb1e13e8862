"""Bottleneck adapters: the only trainable parameters of the system.

Three kinds are supported. ``adaptformer`` is a ReLU bottleneck whose output is added
in parallel to the MLP branch of an encoder block, ``serial_adapter`` applies the same
bottleneck after the MLP residual (Houlsby placement), and ``lora`` adds a linear
low-rank update to the query and value projections of the block's attention.
"""

from __future__ import annotations

from typing import Iterator, Optional

import torch
from torch import nn

from .config import ADAPTER_KINDS, EncoderConfig
from .errors import ConfigurationError, ShapeError

LORA_TARGETS = ("q", "v")


class AdapterWeights(nn.Module):
    """A down/up projection pair ``W_down`` (d x r) and ``W_up`` (r x d)."""

    def __init__(self, dim: int, bottleneck_dim: int, kind: str, layer_index: int,
                 target: Optional[str] = None):
        super().__init__()
        if kind not in ADAPTER_KINDS:
            raise ConfigurationError(f"unknown adapter kind {kind!r}")
        if not 0 < bottleneck_dim < dim:
            raise ConfigurationError(f"bottleneck dim {bottleneck_dim} must satisfy 0 < r < d = {dim}")
        self.kind = kind
        self.layer_index = layer_index
        self.target = target
        self.W_down = nn.Parameter(torch.zeros(dim, bottleneck_dim))
        self.W_up = nn.Parameter(torch.zeros(bottleneck_dim, dim))

    @property
    def key(self) -> str:
        base = f"layer{self.layer_index}"
        return f"{base}.{self.target}" if self.target else base

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "lora":
            return lora_forward(x, self)
        if self.kind == "serial_adapter":
            return serial_adapter_forward(x, self)
        return adaptformer_forward(x, self)


def _check_width(x: torch.Tensor, w: AdapterWeights) -> None:
    if x.shape[-1] != w.W_down.shape[0]:
        raise ShapeError(f"token width {x.shape[-1]} does not match adapter width {w.W_down.shape[0]}")


def _check_kind(w: AdapterWeights, kind: str) -> None:
    if w.kind != kind:
        raise ConfigurationError(f"expected {kind} weights, got {w.kind}")


def adaptformer_forward(x: torch.Tensor, w: AdapterWeights) -> torch.Tensor:
    """relu(x @ W_down) @ W_up, token-wise; no bias and no scale."""
    _check_kind(w, "adaptformer")
    _check_width(x, w)
    return torch.relu(x @ w.W_down) @ w.W_up


def lora_forward(x: torch.Tensor, w: AdapterWeights) -> torch.Tensor:
    _check_kind(w, "lora")
    _check_width(x, w)
    return (x @ w.W_down) @ w.W_up


def serial_adapter_forward(x: torch.Tensor, w: AdapterWeights) -> torch.Tensor:
    _check_kind(w, "serial_adapter")
    _check_width(x, w)
    return torch.relu(x @ w.W_down) @ w.W_up


class AdapterSet(nn.Module):
    """All adapters of one model, keyed ``layer{i}`` (``layer{i}.q`` / ``layer{i}.v`` for LoRA)."""

    def __init__(self, entries: list[AdapterWeights]):
        super().__init__()
        if not entries:
            raise ConfigurationError("an adapter set needs at least one entry")
        kinds = {e.kind for e in entries}
        dims = {e.W_down.shape[1] for e in entries}
        if len(kinds) != 1 or len(dims) != 1:
            raise ConfigurationError("all adapters in a set must share kind and bottleneck dim")
        self.kind = kinds.pop()
        self.bottleneck_dim = dims.pop()
        self.dim = entries[0].W_down.shape[0]
        # ModuleDict keys cannot contain dots
        self._entries = nn.ModuleDict({e.key.replace(".", "_"): e for e in entries})

    @property
    def entries(self) -> dict[str, AdapterWeights]:
        return {e.key: e for e in self._entries.values()}

    @property
    def layer_indices(self) -> tuple[int, ...]:
        return tuple(sorted({e.layer_index for e in self._entries.values()}))

    def for_layer(self, index: int) -> dict[Optional[str], AdapterWeights]:
        return {e.target: e for e in self._entries.values() if e.layer_index == index}

    def __iter__(self) -> Iterator[AdapterWeights]:
        return iter(self._entries.values())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for key, e in sorted(self.entries.items()):
            out[f"{key}.W_down"] = e.W_down.detach()
            out[f"{key}.W_up"] = e.W_up.detach()
        return out


def init_adapters(config: EncoderConfig, kind: str = "adaptformer", bottleneck_dim: Optional[int] = None,
                  seed: int = 0, dtype: torch.dtype = torch.float32) -> AdapterSet:
    """Fresh adapters for every adapted layer: truncated-normal ``W_down``, zero ``W_up``.

    The zero up-projection makes a freshly adapted model compute exactly the frozen model.
    """
    d = config.embed_dim
    r = d // 2 if bottleneck_dim is None else bottleneck_dim
    if r >= d:
        raise ConfigurationError(f"bottleneck dim {r} must be smaller than embed_dim {d}")
    if kind not in ADAPTER_KINDS:
        raise ConfigurationError(f"unknown adapter kind {kind!r}")
    gen = torch.Generator().manual_seed(seed)
    entries = []
    targets = LORA_TARGETS if kind == "lora" else (None,)
    for layer in config.adapted_layers:
        for target in targets:
            w = AdapterWeights(d, r, kind, layer, target)
            with torch.no_grad():
                nn.init.trunc_normal_(w.W_down, std=d**-0.5, a=-2 * d**-0.5, b=2 * d**-0.5, generator=gen)
            entries.append(w)
    return AdapterSet(entries).to(dtype)
