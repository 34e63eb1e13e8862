"""Synthetic-shapes few-shot benchmark.

A class is a (family, texture) pair; colour, size, rotation and position are nuisance
factors drawn per instance. Shapes are rasterized without anti-aliasing by evaluating an
analytic inside-test at pixel centres, so masks are exact. Objects in one image never
overlap, which keeps the mask equal to the union of the target instances' supports.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError, InputError
from .promptdec import Prompt

log = logging.getLogger(__name__)

FAMILIES = ("disk", "square", "triangle", "ring", "cross", "bar")
TEXTURES = ("flat", "stripes", "noise")
CLASSES = tuple(f"{f}-{t}" for f in FAMILIES for t in TEXTURES)

IMAGE_SIZE = 64
MIN_SIZE, MAX_SIZE = 7.0, 12.0
# bounding radius of every family relative to its size parameter
EXTENT = 1.15


@dataclass(frozen=True)
class ShapeClass:
    family: str
    texture: str

    @property
    def class_id(self) -> str:
        return f"{self.family}-{self.texture}"

    @classmethod
    def parse(cls, class_id: str) -> "ShapeClass":
        try:
            family, texture = class_id.split("-")
        except ValueError:
            raise InputError(f"malformed class id {class_id!r}") from None
        if family not in FAMILIES or texture not in TEXTURES:
            raise InputError(f"unknown class {class_id!r}")
        return cls(family, texture)


@dataclass(frozen=True)
class Instance:
    class_id: str
    cx: float
    cy: float
    size: float
    angle: float
    color: tuple[float, float, float]
    texture_seed: int


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    instances: list[Instance] = field(default_factory=list)


@dataclass
class Episode:
    class_id: str
    samples: list[Sample]
    seed: int = 0
    resolution: int = IMAGE_SIZE


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    train_classes: tuple[str, ...]
    test_classes: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise InputError(f"fold {self.fold_id}: train and test classes overlap")


def class_index(class_id: str) -> int:
    ShapeClass.parse(class_id)
    return CLASSES.index(class_id)


# (f + t) takes len(FAMILIES) + len(TEXTURES) - 1 values; more folds would leave some empty
MAX_FOLDS = len(FAMILIES) + len(TEXTURES) - 1


def make_folds(n_folds: int = 3) -> list[FoldSpec]:
    """Class (f, t) is held out in fold (f + t) % n_folds; every fold then mixes families and textures."""
    if not 1 <= n_folds <= MAX_FOLDS:
        raise InputError(f"n_folds must be in [1, {MAX_FOLDS}]")
    folds = []
    for k in range(n_folds):
        test = tuple(c for c in CLASSES
                     if (FAMILIES.index(c.split("-")[0]) + TEXTURES.index(c.split("-")[1])) % n_folds == k)
        train = tuple(c for c in CLASSES if c not in test)
        folds.append(FoldSpec(k, train, test))
    return folds


# -- geometry -------------------------------------------------------------------------

def local_coords(inst: Instance, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates rotated into the instance frame and scaled by its size."""
    dx = xs + 0.5 - inst.cx
    dy = ys + 0.5 - inst.cy
    c, s = np.cos(inst.angle), np.sin(inst.angle)
    u = (c * dx + s * dy) / inst.size
    v = (-s * dx + c * dy) / inst.size
    return u, v


def inside(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if family == "disk":
        return u**2 + v**2 <= 1.0
    if family == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if family == "triangle":
        ok = np.ones(np.shape(u), dtype=bool)
        for phi in np.deg2rad([270.0, 30.0, 150.0]):
            ok &= u * np.cos(phi) + v * np.sin(phi) <= 0.5
        return ok
    if family == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    if family == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if family == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    raise InputError(f"unknown family {family!r}")


def instance_support(inst: Instance, resolution: int = IMAGE_SIZE) -> np.ndarray:
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    u, v = local_coords(inst, xs, ys)
    return inside(inst.class_id.split("-")[0], u, v)


def _texture(inst: Instance, u: np.ndarray, rng_shape: tuple[int, int]) -> np.ndarray:
    texture = inst.class_id.split("-")[1]
    if texture == "flat":
        return np.ones(rng_shape)
    if texture == "stripes":
        # 2px light / 2px dark bands along the instance's own u axis
        return np.where(np.floor(u * inst.size / 2.0) % 2 == 0, 1.0, 0.3)
    return np.random.default_rng(inst.texture_seed).uniform(0.25, 1.0, size=rng_shape)


def render(instances: Sequence[Instance], background: float, bg_seed: int,
           resolution: int = IMAGE_SIZE) -> tuple[np.ndarray, list[np.ndarray]]:
    """Draw instances over a noisy grey background; returns the uint8 image and per-instance supports."""
    rng = np.random.default_rng(bg_seed)
    img = background + rng.uniform(-0.03, 0.03, size=(resolution, resolution, 1))
    img = np.repeat(img, 3, axis=2)
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    supports = []
    for inst in instances:
        u, v = local_coords(inst, xs, ys)
        sup = inside(inst.class_id.split("-")[0], u, v)
        shade = _texture(inst, u, (resolution, resolution))
        color = np.asarray(inst.color)[None, None, :] * shade[..., None]
        img = np.where(sup[..., None], color, img)
        supports.append(sup)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8), supports


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(c) for c in colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.7, 1.0)))


def _place(rng: np.random.Generator, sizes: Sequence[float], resolution: int) -> Optional[list[tuple[float, float]]]:
    """Centres for non-overlapping bounding circles, or None if rejection sampling fails."""
    centres: list[tuple[float, float]] = []
    for s in sizes:
        ext = EXTENT * s
        if 2 * ext >= resolution:
            return None
        for _ in range(200):
            cx, cy = rng.uniform(ext, resolution - ext, size=2)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (ext + EXTENT * ps + 1.0) ** 2
                   for (px, py), ps in zip(centres, sizes)):
                centres.append((float(cx), float(cy)))
                break
        else:
            return None
    return centres


def random_instance(rng: np.random.Generator, class_id: str, cx: float = 0.0, cy: float = 0.0,
                    size: Optional[float] = None) -> Instance:
    return Instance(
        class_id=class_id,
        cx=cx,
        cy=cy,
        size=float(rng.uniform(MIN_SIZE, MAX_SIZE)) if size is None else size,
        angle=float(rng.uniform(0, 2 * np.pi)),
        color=_random_color(rng),
        texture_seed=int(rng.integers(2**31)),
    )


def compose(rng: np.random.Generator, targets: Sequence[Instance], others: Sequence[Instance],
            resolution: int = IMAGE_SIZE) -> Sample:
    """Place ``targets`` and ``others`` without overlap; the mask covers only the targets."""
    allinst = list(targets) + list(others)
    # sizes are specified for IMAGE_SIZE and scale with the resolution
    scale = resolution / IMAGE_SIZE
    sizes = [i.size * scale for i in allinst]
    floor = MIN_SIZE * 0.8 * scale
    for _ in range(100):
        centres = _place(rng, sizes, resolution)
        if centres is not None:
            break
        # too crowded: shrink everything slightly and retry
        sizes = [max(floor, s * 0.9) for s in sizes]
    else:
        raise InputError(f"cannot place {len(allinst)} objects in a {resolution}px image")
    placed = [Instance(i.class_id, cx, cy, s, i.angle, i.color, i.texture_seed)
              for i, (cx, cy), s in zip(allinst, centres, sizes)]
    image, supports = render(placed, float(rng.uniform(0.0, 0.25)), int(rng.integers(2**31)), resolution)
    mask = np.zeros((resolution, resolution), dtype=np.uint8)
    for sup in supports[: len(targets)]:
        mask |= sup.astype(np.uint8)
    return Sample(image, mask, placed)


def _episode_rng(class_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, class_index(class_id)])


def generate_episode(class_id: str, n_samples: int, seed: int, distractors: bool = True,
                     distractor_pool: Optional[Sequence[str]] = None,
                     resolution: int = IMAGE_SIZE) -> Episode:
    """``n_samples`` images, each with at least one instance of ``class_id``.

    With ``distractors`` every image also holds one or two objects of other classes, drawn
    from ``distractor_pool`` (all other classes by default); their pixels are excluded from the mask.
    """
    ShapeClass.parse(class_id)
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    pool = [c for c in (distractor_pool or CLASSES) if c != class_id]
    if distractors and not pool:
        raise InputError("distractor pool is empty")
    rng = _episode_rng(class_id, seed)
    samples = []
    for _ in range(n_samples):
        n_targets = 2 if rng.uniform() < 0.2 else 1
        targets = [random_instance(rng, class_id) for _ in range(n_targets)]
        others = []
        if distractors:
            n_other = 1 if n_targets == 2 else int(rng.integers(1, 3))
            others = [random_instance(rng, pool[int(rng.integers(len(pool)))]) for _ in range(n_other)]
        samples.append(compose(rng, targets, others, resolution))
    return Episode(class_id, samples, seed, resolution)


def generate_tracking_clip(seed: int, n_frames: int = 3, resolution: int = IMAGE_SIZE,
                           classes: Sequence[str] = CLASSES) -> list[Sample]:
    """Frames showing one object instance (fixed appearance, moving) among distractors.

    Distractors often share the object's class or its colour, so following the object
    needs its full appearance; this is the class-agnostic task the base model learns.
    """
    rng = np.random.default_rng([seed, 7919])
    obj = random_instance(rng, classes[int(rng.integers(len(classes)))])
    frames = []
    for _ in range(n_frames):
        others = []
        for _ in range(int(rng.integers(1, 3))):
            r = rng.uniform()
            if r < 0.4:
                other = random_instance(rng, obj.class_id)
            elif r < 0.7:
                cls = classes[int(rng.integers(len(classes)))]
                other = Instance(cls, 0.0, 0.0, float(rng.uniform(MIN_SIZE, MAX_SIZE)),
                                 float(rng.uniform(0, 2 * np.pi)), obj.color, int(rng.integers(2**31)))
            else:
                other = random_instance(rng, classes[int(rng.integers(len(classes)))])
            if other.class_id == obj.class_id and np.allclose(other.color, obj.color):
                continue
            others.append(other)
        frames.append(compose(rng, [obj], others, resolution))
    return frames


def generate_semantic_samples(classes: Sequence[str], n_samples: int, seed: int,
                              resolution: int = IMAGE_SIZE) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Images with one or two objects from ``classes`` and per-pixel labels (0 = background, i + 1 = classes[i])."""
    rng = np.random.default_rng([seed, 104729])
    images, labels = [], []
    for _ in range(n_samples):
        chosen = [classes[int(rng.integers(len(classes)))] for _ in range(int(rng.integers(1, 3)))]
        insts = [random_instance(rng, c) for c in chosen]
        sample = compose(rng, insts, [], resolution)
        label = np.zeros((resolution, resolution), dtype=np.int64)
        for inst in sample.instances:
            label[instance_support(inst, resolution)] = list(classes).index(inst.class_id) + 1
        images.append(sample.image)
        labels.append(label)
    return images, labels


def generate_fold_episodes(classes: Sequence[str], episodes_per_class: int, samples_per_episode: int,
                           seed: int, distractors: bool = True) -> list[Episode]:
    """Episodes for every class in ``classes``; distractors are drawn from the same class set."""
    out = []
    for c in classes:
        for e in range(episodes_per_class):
            out.append(generate_episode(c, samples_per_episode, seed * 1000 + e, distractors,
                                        distractor_pool=classes))
    return out


# -- prompts --------------------------------------------------------------------------

SCRIBBLE_LENGTH = 16


def synthesize_prompt(mask: np.ndarray, kind: str, seed: int = 0) -> Prompt:
    mask = np.asarray(mask)
    if kind == "mask":
        return Prompt("mask", (mask > 0).astype(np.uint8))
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise InputError(f"cannot synthesize a {kind} prompt from an empty mask")
    rng = np.random.default_rng(seed)
    if kind == "point":
        i = int(rng.integers(len(xs)))
        return Prompt("point", [(int(xs[i]), int(ys[i]), "fg")])
    if kind == "box":
        return Prompt("box", (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    if kind == "scribble":
        i = int(rng.integers(len(xs)))
        x, y = int(xs[i]), int(ys[i])
        path = [(x, y)]
        h, w = mask.shape
        for _ in range(SCRIBBLE_LENGTH - 1):
            moves = [(x + dx, y + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                     if 0 <= x + dx < w and 0 <= y + dy < h and mask[y + dy, x + dx]]
            if not moves:
                break
            x, y = moves[int(rng.integers(len(moves)))]
            if (x, y) not in path:
                path.append((x, y))
        return Prompt("scribble", path)
    raise InputError(f"unknown prompt kind {kind!r}")


# -- episode directories --------------------------------------------------------------

def write_episode(episode: Episode, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "class_id": episode.class_id,
        "n_samples": len(episode.samples),
        "seed": episode.seed,
        "resolution": episode.resolution,
    }
    (d / "manifest").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    for i, s in enumerate(episode.samples):
        Image.fromarray(s.image, mode="RGB").save(d / f"sample_{i}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(d / f"sample_{i}_mask.png")


def read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise FormatError(f"missing manifest {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_episode(directory: str | Path) -> Episode:
    d = Path(directory)
    manifest = read_manifest(d / "manifest")
    try:
        class_id = manifest["class_id"]
        n = int(manifest["n_samples"])
        seed = int(manifest.get("seed", 0))
        resolution = int(manifest.get("resolution", IMAGE_SIZE))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed manifest in {d}: {exc}") from None
    samples = []
    for i in range(n):
        img_path, mask_path = d / f"sample_{i}.png", d / f"sample_{i}_mask.png"
        if not img_path.is_file() or not mask_path.is_file():
            raise FormatError(f"episode {d} is missing sample {i}")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
        if image.shape[:2] != (resolution, resolution) or mask.shape != (resolution, resolution):
            raise FormatError(f"sample {i} in {d} does not have resolution {resolution}")
        samples.append(Sample(image, mask))
    return Episode(class_id, samples, seed, resolution)
