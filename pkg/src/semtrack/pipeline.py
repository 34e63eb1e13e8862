"""Prompt-and-propagate inference, episodic adapter training and adapter checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save
from safetensors import safe_open

from .adapters import AdapterSet, AdapterWeights, init_adapters
from .config import TrainerConfig
from .data import Episode
from .encoder import FeatureMap, encode_image, image_to_tensor
from .errors import CompatibilityError, FormatError, InputError, ShapeError
from .memory import MemoryBank, bank_append, bank_reset, encode_memory, memory_attention
from .model import SemTrackModel
from .promptdec import MaskPrediction, Prompt, decode_mask, reference_mask_from_prompt

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"


# -- inference ------------------------------------------------------------------------

@dataclass
class PseudoVideo:
    references: list[tuple[np.ndarray, Prompt]]
    target: np.ndarray


def build_pseudo_video(references: Sequence[tuple[np.ndarray, Prompt]], target: np.ndarray) -> PseudoVideo:
    references = list(references)
    if not references:
        raise InputError("a pseudo-video needs at least one reference")
    shape = np.asarray(target).shape
    for image, _ in references:
        if np.asarray(image).shape != shape:
            raise ShapeError(f"reference resolution {np.asarray(image).shape} differs from target {shape}")
    return PseudoVideo(references, target)


@torch.no_grad()
def build_reference_bank(model: SemTrackModel, references: Sequence[tuple[np.ndarray, Prompt]],
                         adapters: Optional[AdapterSet] = None) -> MemoryBank:
    """Encode every reference into the bank; references never pass through memory attention."""
    bank = MemoryBank()
    for k, (image, prompt) in enumerate(references):
        feats = encode_image(model.encoder, image, adapters, frame_id=f"ref{k}")
        ref_mask = reference_mask_from_prompt(feats, prompt, model.prompt_encoder, model.mask_decoder)
        bank_append(bank, encode_memory(feats, ref_mask.binary, model.mask_downsampler, "reference"))
    return bank


@torch.no_grad()
def segment_with_bank(model: SemTrackModel, bank: MemoryBank, target: np.ndarray,
                      adapters: Optional[AdapterSet] = None) -> MaskPrediction:
    return segment_features(model, bank, encode_image(model.encoder, target, adapters, frame_id="target"))


@torch.no_grad()
def segment_features(model: SemTrackModel, bank: MemoryBank, feats: FeatureMap) -> MaskPrediction:
    """Match already-encoded target features against ``bank`` and decode."""
    matched = memory_attention(feats, bank, model.memory_attention)
    return decode_mask(matched, None, model.prompt_encoder, model.mask_decoder)


def segment_target(model: SemTrackModel, pv: PseudoVideo, adapters: Optional[AdapterSet] = None) -> MaskPrediction:
    bank = build_reference_bank(model, pv.references, adapters)
    try:
        return segment_with_bank(model, bank, pv.target, adapters)
    finally:
        bank_reset(bank)


# -- losses ---------------------------------------------------------------------------

DICE_EPS = 1.0


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy of sigmoid(logits); leading dims are averaged too."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps) over the last two axes, averaged over the rest."""
    if probs.shape != target.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    t = target.to(probs.dtype)
    inter = (probs * t).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


# -- training clips -------------------------------------------------------------------

@dataclass
class TrainingClip:
    reference: tuple[np.ndarray, np.ndarray]
    targets: list[tuple[np.ndarray, np.ndarray]]


def clip_indices(n_samples: int, J: int, rng: np.random.Generator, reference: Optional[int] = None) -> list[int]:
    if J < 1:
        raise InputError("J must be >= 1")
    if n_samples < J + 1:
        raise InputError(f"episode has {n_samples} samples; a clip with J={J} needs {J + 1}")
    if reference is None:
        return [int(i) for i in rng.choice(n_samples, size=J + 1, replace=False)]
    rest = [i for i in range(n_samples) if i != reference]
    return [reference] + [rest[int(i)] for i in rng.choice(len(rest), size=J, replace=False)]


def build_training_clip(episode: Episode, J: int, seed: int) -> TrainingClip:
    idx = clip_indices(len(episode.samples), J, np.random.default_rng(seed))
    s = episode.samples
    return TrainingClip((s[idx[0]].image, s[idx[0]].mask), [(s[i].image, s[i].mask) for i in idx[1:]])


@dataclass
class ForwardOutput:
    loss: torch.Tensor
    bce: list[torch.Tensor]  # per target frame
    dice: list[torch.Tensor]
    frame_losses: list[torch.Tensor]
    logits: list[torch.Tensor]  # per frame, (B, H, W)
    pseudo_masks: list[torch.Tensor]


def training_forward_batch(
    model: SemTrackModel,
    ref_tokens: torch.Tensor,
    ref_masks: torch.Tensor,
    target_tokens: Sequence[torch.Tensor],
    target_masks: Sequence[torch.Tensor],
    adapters: Optional[AdapterSet],
    lambda_bce: float = 1.0,
    lambda_dice: float = 1.0,
    detach_pseudo_masks: bool = True,
    fixed_pseudo_masks: Optional[Sequence[torch.Tensor]] = None,
    logits_override: Optional[Sequence[torch.Tensor]] = None,
) -> ForwardOutput:
    """Reference into memory, then each target is predicted and becomes a pseudo-reference.

    ``*_tokens`` are encoder prefix tokens (see Encoder.forward_prefix), (B, N, d) each.
    ``fixed_pseudo_masks`` replaces the soft masks written to memory (used to differentiate
    the detached objective exactly); ``logits_override`` replaces predictions (testing aid).
    """
    enc = model.encoder
    ref_feats = enc.forward_suffix(ref_tokens, adapters)
    memory = [model.memory_tokens(ref_feats, ref_masks)]
    bces, dices, totals, all_logits, pseudo = [], [], [], [], []
    J = len(target_tokens)
    for j in range(J):
        feats = enc.forward_suffix(target_tokens[j], adapters)
        matched = model.match(feats, torch.cat(memory, dim=1))
        logits = model.decode(matched) if logits_override is None else logits_override[j]
        y = target_masks[j].to(logits.dtype)
        b = bce_loss(logits, y)
        dc = dice_loss(torch.sigmoid(logits), y)
        bces.append(b)
        dices.append(dc)
        totals.append(lambda_bce * b + lambda_dice * dc)
        all_logits.append(logits)
        if j < J - 1:
            if fixed_pseudo_masks is not None:
                soft = fixed_pseudo_masks[j]
            else:
                soft = torch.sigmoid(logits)
                if detach_pseudo_masks:
                    soft = soft.detach()
            pseudo.append(soft)
            memory.append(model.memory_tokens(feats, soft))
    loss = torch.stack(totals).mean()
    return ForwardOutput(loss, bces, dices, totals, all_logits, pseudo)


def _clip_tensors(model: SemTrackModel, clip: TrainingClip):
    cfg = model.config
    dtype = model.encoder.patch_weight.dtype
    with torch.no_grad():
        ref_tok = model.encoder.forward_prefix(image_to_tensor(clip.reference[0], cfg, dtype))
        tgt_tok = [model.encoder.forward_prefix(image_to_tensor(img, cfg, dtype)) for img, _ in clip.targets]
    ref_mask = torch.as_tensor(np.asarray(clip.reference[1]), dtype=dtype)[None]
    tgt_masks = [torch.as_tensor(np.asarray(m), dtype=dtype)[None] for _, m in clip.targets]
    return ref_tok, ref_mask, tgt_tok, tgt_masks


def training_forward(model: SemTrackModel, clip: TrainingClip, adapters: Optional[AdapterSet] = None,
                     cfg: Optional[TrainerConfig] = None, **kwargs) -> ForwardOutput:
    """Single-clip loss; mean over the J target frames of lambda_bce * BCE + lambda_dice * Dice."""
    cfg = cfg or TrainerConfig()
    ref_tok, ref_mask, tgt_tok, tgt_masks = _clip_tensors(model, clip)
    return training_forward_batch(model, ref_tok, ref_mask, tgt_tok, tgt_masks, adapters,
                                  cfg.lambda_bce, cfg.lambda_dice, cfg.detach_pseudo_masks, **kwargs)


# -- trainer --------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    total: float
    bce: float
    dice: float


@dataclass
class PrefixCache:
    """Encoder tokens before the first adapted block, computed once per training image."""

    tokens: list[torch.Tensor]  # per episode, (n_samples, N, d)
    masks: list[torch.Tensor]  # per episode, (n_samples, H, W)

    @classmethod
    @torch.no_grad()
    def build(cls, model: SemTrackModel, episodes: Sequence[Episode], batch: int = 32) -> "PrefixCache":
        dtype = model.encoder.patch_weight.dtype
        tokens, masks = [], []
        for ep in episodes:
            imgs = image_to_tensor(np.stack([s.image for s in ep.samples]), model.config, dtype)
            tokens.append(torch.cat([model.encoder.forward_prefix(imgs[i:i + batch])
                                     for i in range(0, len(imgs), batch)]))
            masks.append(torch.as_tensor(np.stack([s.mask for s in ep.samples]), dtype=dtype))
        return cls(tokens, masks)


def clip_schedule(episodes: Sequence[Episode], J: int, rng: np.random.Generator) -> list[tuple[int, list[int]]]:
    """One clip per sample per epoch: each sample is a reference once, targets drawn from its episode."""
    clips = []
    for e, ep in enumerate(episodes):
        for r in range(len(ep.samples)):
            clips.append((e, clip_indices(len(ep.samples), J, rng, reference=r)))
    order = rng.permutation(len(clips))
    return [clips[i] for i in order]


def train(model: SemTrackModel, episodes: Sequence[Episode], cfg: TrainerConfig,
          adapters: Optional[AdapterSet] = None, kind: str = "adaptformer", bottleneck_dim: Optional[int] = None,
          class_guard: Optional[Callable[[str], None]] = None,
          cache: Optional[PrefixCache] = None) -> tuple[AdapterSet, list[LossRecord]]:
    """Train adapters with Adam on clips from ``episodes``; the base model is never updated.

    ``class_guard`` is called with each clip's class id before use (fold-leakage checks).
    """
    if not episodes:
        raise InputError("training needs at least one episode")
    torch.manual_seed(cfg.seed)
    dtype = model.encoder.patch_weight.dtype
    if adapters is None:
        adapters = init_adapters(model.config, kind, bottleneck_dim, seed=cfg.seed, dtype=dtype)
    adapters.train()
    for p in adapters.parameters():
        p.requires_grad_(True)
    cache = cache or PrefixCache.build(model, episodes)
    opt = torch.optim.Adam(adapters.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    J = cfg.clip_targets
    curve: list[LossRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        schedule = clip_schedule(episodes, J, rng)
        for start in range(0, len(schedule), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = schedule[start:start + cfg.batch_size]
            if class_guard is not None:
                for e, _ in batch:
                    class_guard(episodes[e].class_id)
            ref_tok = torch.stack([cache.tokens[e][idx[0]] for e, idx in batch])
            ref_mask = torch.stack([cache.masks[e][idx[0]] for e, idx in batch])
            tgt_tok = [torch.stack([cache.tokens[e][idx[j + 1]] for e, idx in batch]) for j in range(J)]
            tgt_mask = [torch.stack([cache.masks[e][idx[j + 1]] for e, idx in batch]) for j in range(J)]
            out = training_forward_batch(model, ref_tok, ref_mask, tgt_tok, tgt_mask, adapters,
                                         cfg.lambda_bce, cfg.lambda_dice, cfg.detach_pseudo_masks)
            opt.zero_grad()
            out.loss.backward()
            opt.step()
            curve.append(LossRecord(step, out.loss.item(),
                                    float(torch.stack(out.bce).detach().mean()),
                                    float(torch.stack(out.dice).detach().mean())))
            if step % 50 == 0:
                log.info("step %d epoch %d loss %.4f", step, epoch, out.loss.item())
            step += 1
    adapters.eval()
    for p in adapters.parameters():
        p.requires_grad_(False)
    return adapters, curve


def write_loss_curve(curve: Sequence[LossRecord], path: str | Path) -> None:
    lines = ["step,total,bce,dice"] + [f"{r.step},{r.total:.8g},{r.bce:.8g},{r.dice:.8g}" for r in curve]
    Path(path).write_text("\n".join(lines) + "\n")


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(adapters: AdapterSet, path: str | Path, config_fingerprint: str, seed: int = 0) -> None:
    """Adapters-only checkpoint: safetensors arrays plus a string metadata record."""
    tensors = {k: v.contiguous().clone() for k, v in adapters.named_arrays().items()}
    metadata = {
        "kind": adapters.kind,
        "bottleneck_dim": str(adapters.bottleneck_dim),
        "config_fingerprint": config_fingerprint,
        "seed": str(seed),
        "version": CHECKPOINT_VERSION,
    }
    Path(path).write_bytes(_canonical_safetensors(save(tensors, metadata=metadata)))


def _canonical_safetensors(blob: bytes) -> bytes:
    """Re-emit the JSON header with sorted keys; the writer's key order is not stable across runs.

    Tensor offsets are relative to the data section, so only the header bytes change.
    """
    n = struct.unpack("<Q", blob[:8])[0]
    header = json.loads(blob[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + blob[8 + n:]


def read_checkpoint_metadata(path: str | Path) -> dict[str, str]:
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except (SafetensorError, OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    missing = {"kind", "bottleneck_dim", "config_fingerprint", "seed", "version"} - set(meta)
    if missing:
        raise FormatError(f"checkpoint {path} lacks metadata {sorted(missing)}")
    return meta


def load_checkpoint(path: str | Path, expected_fingerprint: Optional[str] = None) -> AdapterSet:
    meta = read_checkpoint_metadata(path)
    if meta["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta['version']}")
    if expected_fingerprint is not None and meta["config_fingerprint"] != expected_fingerprint:
        raise CompatibilityError(
            f"checkpoint was trained for model {meta['config_fingerprint']}, not {expected_fingerprint}")
    try:
        arrays = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    kind, r = meta["kind"], int(meta["bottleneck_dim"])
    entries = []
    for key in sorted({k.rsplit(".", 1)[0] for k in arrays}):
        down, up = arrays.get(f"{key}.W_down"), arrays.get(f"{key}.W_up")
        if down is None or up is None or not key.startswith("layer"):
            raise FormatError(f"checkpoint entry {key!r} is incomplete")
        parts = key.split(".")
        try:
            layer = int(parts[0][len("layer"):])
        except ValueError:
            raise FormatError(f"bad checkpoint key {key!r}") from None
        target = parts[1] if len(parts) > 1 else None
        w = AdapterWeights(down.shape[0], r, kind, layer, target).to(down.dtype)
        if tuple(down.shape) != tuple(w.W_down.shape) or tuple(up.shape) != tuple(w.W_up.shape):
            raise FormatError(f"checkpoint entry {key!r} has inconsistent shapes")
        with torch.no_grad():
            w.W_down.copy_(down)
            w.W_up.copy_(up)
        entries.append(w)
    if not entries:
        raise FormatError(f"checkpoint {path} holds no adapters")
    adapters = AdapterSet(entries).eval()
    for p in adapters.parameters():
        p.requires_grad_(False)
    return adapters


# -- k-shot evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    miou: float
    per_class: dict[str, float]
    predictions: list[np.ndarray] = field(default_factory=list, repr=False)
    class_ids: list[str] = field(default_factory=list, repr=False)


def evaluate_fss(model: SemTrackModel, episodes: Sequence[Episode], adapters: Optional[AdapterSet] = None,
                 shots: int = 1, prompt_kind: str = "mask", targets_per_episode: Optional[int] = None,
                 seed: int = 0, permute_references: bool = False) -> EvalResult:
    """The first ``shots`` samples of each episode are references, the following ones targets."""
    from .analysis import compute_miou
    from .data import synthesize_prompt

    preds, gts, classes = [], [], []
    rng = np.random.default_rng(seed)
    for e, ep in enumerate(episodes):
        if len(ep.samples) < shots + 1:
            raise InputError(f"episode of {ep.class_id} has {len(ep.samples)} samples; {shots}-shot needs more")
        refs = [(s.image, synthesize_prompt(s.mask, prompt_kind, seed * 7919 + e * 31 + k))
                for k, s in enumerate(ep.samples[:shots])]
        if permute_references:
            refs = [refs[i] for i in rng.permutation(len(refs))]
        end = len(ep.samples) if targets_per_episode is None else shots + targets_per_episode
        bank = build_reference_bank(model, refs, adapters)
        for s in ep.samples[shots:end]:
            preds.append(segment_with_bank(model, bank, s.image, adapters).numpy())
            gts.append(s.mask)
            classes.append(ep.class_id)
        bank_reset(bank)
    miou, per_class = compute_miou(preds, gts, classes)
    return EvalResult(miou, per_class, preds, classes)
