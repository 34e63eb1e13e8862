"""Class-agnostic pretraining that turns a random base into a promptable object tracker.

The base model learns two things on synthetic videos: decoding a mask from a point, box
or scribble prompt, and propagating a mask through memory attention to later frames of
the same object instance. Nothing here is semantic: distractors frequently share the
tracked object's class or colour, so the tracker keys on instance appearance.
After pretraining every base parameter is frozen for good.
"""

from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .config import BaseConfig, EncoderConfig
from .data import generate_tracking_clip, synthesize_prompt
from .encoder import image_to_tensor
from .layers import freeze
from .model import SemTrackModel, init_model
from .pipeline import bce_loss, dice_loss, training_forward_batch
from .promptdec import sparse_batch

log = logging.getLogger(__name__)

SPARSE_KINDS = ("point", "box", "scribble")


def _prompt_batch(model: SemTrackModel, masks: np.ndarray, kind: str, seed: int):
    prompts = [synthesize_prompt(m, kind, seed + i) for i, m in enumerate(masks)]
    if kind == "scribble":
        n = min(len(p.payload) for p in prompts)
        prompts = [type(p)("scribble", list(p.payload)[:n]) for p in prompts]
    return sparse_batch(prompts, model.prompt_encoder)


def pretrain_base(model: SemTrackModel, cfg: BaseConfig, log_every: int = 100) -> list[float]:
    """Train every base parameter in place, then freeze; returns the per-step loss."""
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.learning_rate, total_steps=max(cfg.steps, 1),
                                                pct_start=0.05)
    dtype = model.encoder.patch_weight.dtype
    rng = np.random.default_rng([cfg.seed, 31337])
    losses = []
    for step in range(cfg.steps):
        clips = [generate_tracking_clip(int(rng.integers(2**62)), cfg.clip_frames) for _ in range(cfg.batch_size)]
        frames = [
            (image_to_tensor(np.stack([c[f].image for c in clips]), model.config, dtype),
             torch.as_tensor(np.stack([c[f].mask for c in clips]), dtype=dtype))
            for f in range(cfg.clip_frames)
        ]
        tokens = [model.encoder.forward_prefix(img) for img, _ in frames]
        out = training_forward_batch(model, tokens[0], frames[0][1], tokens[1:], [m for _, m in frames[1:]], None)

        kind = SPARSE_KINDS[step % len(SPARSE_KINDS)]
        sparse = _prompt_batch(model, np.stack([c[0].mask for c in clips]), kind, int(rng.integers(2**31)))
        ref_feats = model.encoder.forward_suffix(tokens[0])
        logits = model.decode(ref_feats, sparse)
        prompt_loss = bce_loss(logits, frames[0][1]) + dice_loss(torch.sigmoid(logits), frames[0][1])

        loss = out.loss + prompt_loss
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("base step %d: track %.4f prompt %.4f", step, out.loss.item(), prompt_loss.item())
    freeze(model)
    model.base_tag = base_tag(model.config, cfg)
    return losses


def base_tag(config: EncoderConfig, cfg: BaseConfig) -> str:
    return f"pretrained:{config.fingerprint()}:{cfg.seed}:{cfg.steps}:{cfg.batch_size}:{cfg.learning_rate}:{cfg.clip_frames}"


def default_cache_dir() -> Path:
    return Path(os.environ.get("SEMTRACK_CACHE", Path.home() / ".cache" / "semtrack"))


def base_model(config: EncoderConfig, cfg: BaseConfig, cache_dir: Optional[Path] = None) -> SemTrackModel:
    """The pretrained frozen base for (config, cfg), built once and cached on disk."""
    model = init_model(config, cfg.seed)
    if cfg.steps == 0:
        return model
    tag = base_tag(config, cfg)
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = cache_dir / f"base-{hashlib.sha256(tag.encode()).hexdigest()[:16]}.safetensors"
    if path.is_file():
        state = load_file(str(path))
        model.load_state_dict(state)
        freeze(model)
        model.base_tag = tag
        return model
    log.info("pretraining base model (%d steps); cache at %s", cfg.steps, path)
    pretrain_base(model, cfg)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_file({k: v.contiguous() for k, v in model.state_dict().items()}, str(tmp), metadata={"tag": tag})
    tmp.replace(path)
    return model
