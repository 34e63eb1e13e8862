"""Feature-space diagnostics: object features, PCA, centroid assignment, linear probing, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from sklearn.cluster import KMeans

from .adapters import AdapterSet
from .data import Episode, instance_support
from .encoder import image_to_tensor
from .errors import InputError, ShapeError
from .model import SemTrackModel

log = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.5


# -- metrics --------------------------------------------------------------------------

def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def compute_miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                 class_ids: Optional[Sequence[str]] = None) -> tuple[float, dict[str, float]]:
    """Foreground IoU per class (intersections and unions summed over that class's pairs), then the mean.

    Without ``class_ids`` every pair belongs to a single class ``"all"``.
    """
    if len(preds) != len(gts):
        raise ShapeError("preds and gts differ in length")
    if class_ids is None:
        class_ids = ["all"] * len(preds)
    inter: dict[str, int] = {}
    union: dict[str, int] = {}
    for p, g, c in zip(preds, gts, class_ids):
        p, g = np.asarray(p, dtype=bool), np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
        inter[c] = inter.get(c, 0) + int(np.logical_and(p, g).sum())
        union[c] = union.get(c, 0) + int(np.logical_or(p, g).sum())
    per_class = {c: (inter[c] / union[c] if union[c] else 1.0) for c in inter}
    if not per_class:
        raise InputError("no predictions to score")
    return float(np.mean(list(per_class.values()))), per_class


def semantic_miou(preds: Sequence[np.ndarray], labels: Sequence[np.ndarray], n_classes: int) -> float:
    """Multi-class mIoU over the label values present in the ground truth."""
    inter = np.zeros(n_classes)
    union = np.zeros(n_classes)
    present = np.zeros(n_classes, dtype=bool)
    for p, g in zip(preds, labels):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} vs labels {g.shape}")
        for c in range(n_classes):
            pc, gc = p == c, g == c
            inter[c] += np.logical_and(pc, gc).sum()
            union[c] += np.logical_or(pc, gc).sum()
            present[c] |= gc.any()
    return float(np.mean(inter[present] / union[present]))


# -- object features ------------------------------------------------------------------

@dataclass
class ObjectFeature:
    vector: np.ndarray
    class_id: str
    split: str = "train"


def token_coverage(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of each patch covered by the mask, (h, w)."""
    m = np.asarray(mask, dtype=np.float64)
    g = m.shape[0] // patch_size
    return m.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))


def masked_token_mean(features: np.ndarray, mask: np.ndarray, patch_size: int) -> Optional[np.ndarray]:
    """Mean of the tokens whose patch is at least half covered by ``mask``; None if there are none."""
    keep = token_coverage(mask, patch_size) >= COVERAGE_THRESHOLD
    if not keep.any():
        return None
    return np.asarray(features)[keep].mean(axis=0)


@torch.no_grad()
def encode_batch(model: SemTrackModel, images: Sequence[np.ndarray], adapters: Optional[AdapterSet] = None,
                 batch: int = 32) -> np.ndarray:
    dtype = model.encoder.patch_weight.dtype
    x = image_to_tensor(np.stack(images), model.config, dtype)
    return torch.cat([model.encode(x[i:i + batch], adapters) for i in range(0, len(x), batch)]).numpy()


def extract_object_features(model: SemTrackModel, episodes: Sequence[Episode], adapters: Optional[AdapterSet] = None,
                            split: str = "train") -> list[ObjectFeature]:
    """One vector per target-class instance (per sample mask when instance geometry is unknown)."""
    out = []
    p = model.config.patch_size
    for ep in episodes:
        feats = encode_batch(model, [s.image for s in ep.samples], adapters)
        for f, s in zip(feats, ep.samples):
            targets = [i for i in s.instances if i.class_id == ep.class_id]
            masks = [instance_support(i, ep.resolution) for i in targets] if targets else [s.mask]
            for m in masks:
                v = masked_token_mean(f, m, p)
                if v is None:
                    log.warning("instance of %s covers no token at >= %.0f%%; skipped", ep.class_id,
                                100 * COVERAGE_THRESHOLD)
                    continue
                out.append(ObjectFeature(v, ep.class_id, split))
    return out


# -- PCA ------------------------------------------------------------------------------

@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (d, d), orthonormal rows by decreasing variance
    explained_variance_ratio: np.ndarray


def pca_fit(features: np.ndarray) -> PCAModel:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("PCA needs a 2-D array with at least two samples")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=True)
    var = np.zeros(X.shape[1])
    var[: len(s)] = s**2
    total = var.sum()
    ratios = var / total if total > 0 else var
    return PCAModel(mean, vt, ratios)


def pca_project(model: PCAModel, features: np.ndarray, n_components: int) -> np.ndarray:
    d = model.components.shape[1]
    if not 1 <= n_components <= d:
        raise InputError(f"n_components must be in [1, {d}], got {n_components}")
    return (np.asarray(features, dtype=np.float64) - model.mean) @ model.components[:n_components].T


def pca_reconstruct(model: PCAModel, reduced: np.ndarray) -> np.ndarray:
    n = reduced.shape[1]
    return reduced @ model.components[:n] + model.mean


# -- centroid assignment --------------------------------------------------------------

def _stack(feats: Sequence[ObjectFeature]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([f.vector for f in feats]).astype(np.float64), np.array([f.class_id for f in feats])


def centroid_assignment_accuracy(train: Sequence[ObjectFeature], test: Sequence[ObjectFeature],
                                 n_components: Optional[int] = None, seed: int = 0, n_init: int = 50) -> float:
    """k-means centroids on (PCA-reduced) train features, nearest-centroid labels on test.

    Clusters take the majority train class (ties to the lowest class id). Returns the mean
    of per-class test accuracies. ``n_components=None`` uses the unreduced features.
    """
    if not train or not test:
        raise InputError("both splits need features")
    Xtr, ytr = _stack(train)
    Xte, yte = _stack(test)
    classes = sorted(set(ytr))
    unseen = set(yte) - set(classes)
    if unseen:
        raise InputError(f"test classes {sorted(unseen)} are absent from train")
    if n_components is not None and not 1 <= n_components <= Xtr.shape[1]:
        raise InputError(f"n_components must be in [1, {Xtr.shape[1]}], got {n_components}")
    # a full-rank projection is an isometry, so nearest-centroid decisions are those of the raw features
    if n_components is not None and n_components < Xtr.shape[1]:
        pca = pca_fit(Xtr)
        Xtr, Xte = pca_project(pca, Xtr, n_components), pca_project(pca, Xte, n_components)
    km = KMeans(n_clusters=len(classes), init="k-means++", n_init=n_init, random_state=seed).fit(Xtr)
    cluster_class = {}
    for c in range(len(classes)):
        members = ytr[km.labels_ == c]
        counts = {k: int((members == k).sum()) for k in classes}
        best = max(counts.values())
        cluster_class[c] = min(k for k in classes if counts[k] == best)
    pred = np.array([cluster_class[int(c)] for c in km.predict(Xte)])
    return float(np.mean([np.mean(pred[yte == k] == k) for k in sorted(set(yte))]))


def pca_sweep(train: Sequence[ObjectFeature], test: Sequence[ObjectFeature], component_grid: Sequence[int],
              seed: int = 0, n_init: int = 50) -> list[tuple[int, float]]:
    """Accuracy at each grid size divided by the accuracy of the unreduced features."""
    full = centroid_assignment_accuracy(train, test, None, seed, n_init)
    if full == 0:
        raise ZeroDivisionError("full-space accuracy is zero; relative accuracy is undefined")
    return [(n, centroid_assignment_accuracy(train, test, n, seed, n_init) / full) for n in component_grid]


def write_table(rows: Sequence[Sequence], header: Sequence[str], path: str | Path) -> None:
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# -- linear probing -------------------------------------------------------------------

class LinearProbe(torch.nn.Module):
    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.linear = torch.nn.Linear(dim, n_classes)
        torch.nn.init.zeros_(self.linear.weight)
        torch.nn.init.zeros_(self.linear.bias)

    def forward(self, feats: torch.Tensor, size: int) -> torch.Tensor:
        """(B, h, w, d) -> (B, C, size, size) pixel logits."""
        logits = self.linear(feats).permute(0, 3, 1, 2)
        return torch.nn.functional.interpolate(logits, size=(size, size), mode="bilinear", align_corners=False)


def fit_linear_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int, steps: int = 300,
                     lr: float = 1e-2, seed: int = 0) -> LinearProbe:
    """Full-batch Adam on pixel cross-entropy; weights start at zero."""
    torch.manual_seed(seed)
    f = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    probe = LinearProbe(f.shape[-1], n_classes)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(probe(f, y.shape[-1]), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return probe


@torch.no_grad()
def probe_predict(probe: LinearProbe, feats: np.ndarray, size: int) -> np.ndarray:
    f = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    return probe(f, size).argmax(dim=1).numpy()


def linear_probe(model: SemTrackModel, train_set: tuple[Sequence[np.ndarray], Sequence[np.ndarray]],
                 test_set: tuple[Sequence[np.ndarray], Sequence[np.ndarray]], n_classes: int,
                 adapters: Optional[AdapterSet] = None, steps: int = 300, lr: float = 1e-2, seed: int = 0) -> float:
    """Test mIoU of a per-token linear classifier trained on frozen (optionally adapted) features.

    Sets are (images, label maps) with labels in [0, n_classes).
    """
    train_labels = np.stack(train_set[1])
    test_labels = np.stack(test_set[1])
    missing = set(np.unique(test_labels)) - set(np.unique(train_labels))
    if missing:
        raise InputError(f"classes {sorted(missing)} never appear in the probe's training set")
    train_feats = encode_batch(model, list(train_set[0]), adapters)
    test_feats = encode_batch(model, list(test_set[0]), adapters)
    probe = fit_linear_probe(train_feats, train_labels, n_classes, steps, lr, seed)
    preds = probe_predict(probe, test_feats, test_labels.shape[-1])
    return semantic_miou(list(preds), list(test_labels), n_classes)


# -- PCA-RGB --------------------------------------------------------------------------

def pca_rgb(features_per_token: np.ndarray, image_size: Optional[int] = None) -> np.ndarray:
    """(n, h, w, d) token features -> (n, S, S, 3) uint8 using a joint 3-component PCA.

    Channels are min-max scaled over all images; a channel without variance renders mid-grey.
    """
    F = np.asarray(features_per_token, dtype=np.float64)
    if F.ndim == 3:
        F = F[None]
    n, h, w, d = F.shape
    if d < 3:
        raise InputError("PCA-RGB needs at least three feature dimensions")
    flat = F.reshape(-1, d)
    pca = pca_fit(flat)
    comp = pca_project(pca, flat, 3)
    out = np.empty_like(comp)
    for c in range(3):
        lo, hi = comp[:, c].min(), comp[:, c].max()
        span = hi - lo
        if span <= 1e-12 * max(1.0, np.abs(comp[:, c]).max()) or pca.explained_variance_ratio[c] == 0:
            out[:, c] = 128.0
        else:
            out[:, c] = (comp[:, c] - lo) / span * 255.0
    rgb = out.reshape(n, h, w, 3).round().astype(np.uint8)
    size = image_size or h
    if size % h:
        raise ShapeError(f"image size {size} is not a multiple of the token grid {h}")
    scale = size // h
    return rgb.repeat(scale, axis=1).repeat(scale, axis=2)


def pca_rgb_export(features_per_token: np.ndarray, path: str | Path, image_size: Optional[int] = None) -> np.ndarray:
    """Write the PCA-RGB rendering of all images side by side to a PNG; returns the per-image arrays."""
    rgb = pca_rgb(features_per_token, image_size)
    Image.fromarray(np.concatenate(list(rgb), axis=1), mode="RGB").save(path)
    return rgb
