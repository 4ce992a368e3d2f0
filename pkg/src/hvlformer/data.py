"""Synthetic shape dataset, semi-supervised splits and three-view augmentation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ClassSpec, ModelConfig, default_class_specs, stream_seed

log = logging.getLogger(__name__)

SHAPES = ["circle", "square", "triangle", "ring", "stripe", "blob"]

# per shape class: base RGB colour and texture kind
_APPEARANCE = {
    "circle": ((0.90, 0.25, 0.20), "solid"),
    "square": ((0.20, 0.75, 0.25), "hstripes"),
    "triangle": ((0.25, 0.35, 0.95), "checker"),
    "ring": ((0.95, 0.85, 0.20), "solid"),
    "stripe": ((0.80, 0.30, 0.85), "vstripes"),
    "blob": ((0.20, 0.85, 0.85), "dots"),
}


def ignore_index(num_classes: int) -> int:
    return num_classes


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, int64 class ids or IGNORE
    labeled: bool = True
    sample_id: str = ""

    def validate(self, num_classes: int) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask and image shapes differ")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values outside [0, 1]")
        bad = (self.mask < 0) | ((self.mask >= num_classes) & (self.mask != ignore_index(num_classes)))
        if bad.any():
            raise ValueError("mask contains ids outside 0..K-1 and IGNORE")


# --------------------------------------------------------------------------
# generation


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "stripe":
        return (np.abs(dy) <= max(1.5, r * 0.3)) & (np.abs(dx) <= r * 1.2)
    if kind == "blob":
        m = np.zeros((h, w), dtype=bool)
        for _ in range(3):
            oy, ox = rng.uniform(-0.5, 0.5, size=2) * r
            rr = r * rng.uniform(0.45, 0.65)
            m |= (dy - oy) ** 2 + (dx - ox) ** 2 <= rr**2
        return m
    raise ValueError(kind)


def _texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    period = int(rng.integers(3, 5))
    if kind == "solid":
        return np.ones((h, w))
    if kind == "hstripes":
        return np.where((yy // 2) % 2 == 0, 1.0, 0.6)
    if kind == "vstripes":
        return np.where((xx // 2) % 2 == 0, 1.0, 0.55)
    if kind == "checker":
        return np.where(((yy // period) + (xx // period)) % 2 == 0, 1.0, 0.65)
    if kind == "dots":
        return np.where((yy % period == 0) & (xx % period == 0), 0.5, 1.0)
    raise ValueError(kind)


def generate_sample(
    cfg: ModelConfig,
    seed: int,
    index: int,
    class_probs: np.ndarray | None = None,
) -> Sample:
    rng = np.random.default_rng(stream_seed(seed, f"sample:{index}"))
    h, w = cfg.image_size
    k = cfg.num_classes
    shapes = SHAPES[: k - 1]
    if class_probs is None:
        class_probs = np.full(len(shapes), 1.0 / len(shapes))
    class_probs = np.asarray(class_probs, dtype=np.float64)
    class_probs = class_probs / class_probs.sum()

    bg = np.array([0.15, 0.15, 0.18]) + rng.normal(0, 0.03, size=3)
    image = np.clip(bg[None, None, :] + rng.normal(0, 0.04, size=(h, w, 3)), 0, 1)
    mask = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    scale = min(h, w)

    n_shapes = int(rng.integers(1, 5))
    placed = 0
    for _ in range(n_shapes):
        cls = int(rng.choice(len(shapes), p=class_probs)) + 1
        kind = shapes[cls - 1]
        for _attempt in range(40):
            r = rng.uniform(0.10, 0.22) * scale
            cy = rng.uniform(r, h - r)
            cx = rng.uniform(r, w - r)
            m = _shape_mask(kind, h, w, cy, cx, r, rng)
            if m.sum() < 4:
                continue
            grown = m.copy()
            grown[1:, :] |= m[:-1, :]
            grown[:-1, :] |= m[1:, :]
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            if (grown & occupied).any():
                continue
            base, tex = _APPEARANCE[kind]
            colour = np.clip(np.asarray(base) + rng.normal(0, 0.06, size=3), 0, 1)
            texture = _texture(tex, h, w, rng)
            pix = colour[None, None, :] * texture[..., None] + rng.normal(0, 0.03, size=(h, w, 3))
            image[m] = np.clip(pix[m], 0, 1)
            mask[m] = cls
            occupied |= m
            placed += 1
            break
    if placed == 0:
        # degenerate placement failure: fall back to a centred shape
        cls = int(rng.choice(len(shapes), p=class_probs)) + 1
        m = _shape_mask(shapes[cls - 1], h, w, h / 2, w / 2, 0.2 * scale, rng)
        image[m] = np.asarray(_APPEARANCE[shapes[cls - 1]][0])
        mask[m] = cls
    return Sample(image.astype(np.float32), mask, True, f"{seed}_{index:06d}")


def generate_dataset(n: int, cfg: ModelConfig, seed: int, class_probs=None, offset: int = 0) -> list[Sample]:
    """Generate ``n`` toy samples; sample ``i`` depends only on ``(seed, i + offset)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if cfg.num_classes < 2 or cfg.num_classes > len(SHAPES) + 1:
        raise ValueError(f"toy data needs 2 <= K <= {len(SHAPES) + 1}")
    return [generate_sample(cfg, seed, i + offset, class_probs) for i in range(n)]


# --------------------------------------------------------------------------
# geometry records


@dataclass(frozen=True)
class GeomRecord:
    """Grid-exact geometry of an augmented view relative to the original.

    Forward map: original ``(y, x)`` -> view ``(y + dy, x' + dx)`` with
    ``x' = W - 1 - x`` when ``flip``.  ``box`` is a CutMix rectangle
    ``(y0, x0, y1, x1)`` in view coordinates whose pixels come from a donor.
    """

    height: int
    width: int
    flip: bool = False
    dy: int = 0
    dx: int = 0
    box: tuple[int, int, int, int] | None = None

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dy == 0 and self.dx == 0 and self.box is None

    def inverse(self, y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """View coordinates -> original coordinates (may fall off the grid)."""
        oy = np.asarray(y) - self.dy
        ox = np.asarray(x) - self.dx
        if self.flip:
            ox = self.width - 1 - ox
        return oy, ox

    def forward(self, y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y, x = np.asarray(y), np.asarray(x)
        if self.flip:
            x = self.width - 1 - x
        return y + self.dy, x + self.dx

    def validity(self, stride: int = 1) -> np.ndarray:
        """Boolean map in view coordinates of pixels that survive the inverse."""
        h, w = self.height // stride, self.width // stride
        yy, xx = np.mgrid[0:h, 0:w]
        g = self._scaled(stride)
        oy, ox = g.inverse(yy, xx)
        ok = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        if g.box is not None:
            y0, x0, y1, x1 = g.box
            ok &= ~((yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1))
        return ok

    def _scaled(self, stride: int) -> "GeomRecord":
        if stride == 1:
            return self
        if self.height % stride or self.width % stride or self.dy % stride or self.dx % stride:
            raise ValueError(f"geometry not grid-exact at stride {stride}")
        box = None
        if self.box is not None:
            if any(v % stride for v in self.box):
                raise ValueError(f"cutmix box not aligned to stride {stride}")
            box = tuple(v // stride for v in self.box)
        return GeomRecord(self.height // stride, self.width // stride, self.flip,
                          self.dy // stride, self.dx // stride, box)

    def gather_index(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Flat view index for every original position, plus original-frame validity."""
        g = self._scaled(stride)
        h, w = g.height, g.width
        yy, xx = np.mgrid[0:h, 0:w]
        vy, vx = g.forward(yy, xx)
        inside = (vy >= 0) & (vy < h) & (vx >= 0) & (vx < w)
        if g.box is not None:
            y0, x0, y1, x1 = g.box
            inside &= ~((vy >= y0) & (vy < y1) & (vx >= x0) & (vx < x1))
        idx = np.where(inside, np.clip(vy, 0, h - 1) * w + np.clip(vx, 0, w - 1), 0)
        return idx.reshape(-1), inside


def warp_back(geom: GeomRecord, view_map: torch.Tensor, stride: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Bring ``[..., h, w]`` maps from view coordinates into the original frame.

    Returns the warped maps and a boolean validity map ``[h, w]`` in the
    original frame.  Invalid positions hold arbitrary (finite) values.
    """
    h, w = view_map.shape[-2:]
    if geom.is_identity:
        return view_map, torch.ones(h, w, dtype=torch.bool, device=view_map.device)
    idx, valid = geom.gather_index(stride)
    if idx.size != h * w:
        raise ValueError(f"map of size {h}x{w} does not match geometry at stride {stride}")
    flat = view_map.reshape(*view_map.shape[:-2], h * w)
    out = flat.index_select(-1, torch.as_tensor(idx, device=view_map.device)).reshape(view_map.shape)
    return out, torch.as_tensor(valid, device=view_map.device)


def _apply_geometry(arr: np.ndarray, geom: GeomRecord, fill) -> np.ndarray:
    out = np.empty_like(arr)
    out[...] = fill
    h, w = geom.height, geom.width
    yy, xx = np.mgrid[0:h, 0:w]
    vy, vx = geom.forward(yy, xx)
    ok = (vy >= 0) & (vy < h) & (vx >= 0) & (vx < w)
    out[vy[ok], vx[ok]] = arr[yy[ok], xx[ok]]
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    weak_brightness: float = 0.08
    weak_contrast: float = 0.08
    weak_blur_prob: float = 0.5
    strong_jitter: float = 0.35
    strong_channel_mix: float = 0.15
    p_flip: float = 0.5
    p_translate: float = 0.5
    max_shift_cells: int = 1
    p_cutmix: float = 0.5
    grid: int = 16  # translations and cutmix boxes are multiples of this

    @classmethod
    def identity(cls, grid: int = 16) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0.0, grid)

    def scaled(self, weak: float, strong: float) -> "AugmentParams":
        return replace(
            self,
            weak_brightness=self.weak_brightness * weak,
            weak_contrast=self.weak_contrast * weak,
            weak_blur_prob=self.weak_blur_prob * min(weak, 1.0),
            strong_jitter=self.strong_jitter * strong,
            strong_channel_mix=self.strong_channel_mix * strong,
            p_flip=self.p_flip * min(strong, 1.0),
            p_translate=self.p_translate * min(strong, 1.0),
            p_cutmix=self.p_cutmix * min(strong, 1.0),
        )


@dataclass
class ViewTriplet:
    original: Sample
    weak: Sample
    strong: Sample
    geom_w: GeomRecord
    geom_s: GeomRecord


def _blur3(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    p = np.pad(img, ((1, 1), (0, 0), (0, 0)), mode="edge")
    img = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    p = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
    return k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]


def _photometric(img: np.ndarray, brightness: float, contrast: float, rng: np.random.Generator) -> np.ndarray:
    if brightness == 0 and contrast == 0:
        return img
    b = rng.uniform(-brightness, brightness)
    c = 1.0 + rng.uniform(-contrast, contrast)
    mean = img.mean()
    return np.clip((img - mean) * c + mean + b, 0, 1)


def make_views(
    s: Sample,
    seed: int,
    donor: Sample | None = None,
    params: AugmentParams | None = None,
    num_classes: int | None = None,
) -> ViewTriplet:
    """Build (original, weak, strong) views with exact geometry records."""
    params = params or AugmentParams()
    rng = np.random.default_rng(stream_seed(seed, f"views:{s.sample_id}"))
    h, w = s.mask.shape
    img = s.image.astype(np.float64)

    weak_img = _photometric(img, params.weak_brightness, params.weak_contrast, rng)
    if rng.random() < params.weak_blur_prob:
        weak_img = _blur3(weak_img)
    weak = Sample(weak_img.astype(np.float32), s.mask.copy(), s.labeled, s.sample_id)
    geom_w = GeomRecord(h, w)

    # strong: photometric jitter, geometry, then cutmix in view coordinates
    strong_img = img.copy()
    if params.strong_jitter > 0:
        strong_img = _photometric(strong_img, params.strong_jitter, params.strong_jitter, rng)
        sat = 1.0 + rng.uniform(-params.strong_jitter, params.strong_jitter)
        grey = strong_img.mean(axis=2, keepdims=True)
        strong_img = np.clip(grey + (strong_img - grey) * sat, 0, 1)
    if params.strong_channel_mix > 0:
        mix = np.eye(3) + rng.uniform(-params.strong_channel_mix, params.strong_channel_mix, size=(3, 3))
        strong_img = np.clip(strong_img @ mix.T, 0, 1)

    flip = bool(rng.random() < params.p_flip)
    dy = dx = 0
    grid = params.grid
    if params.max_shift_cells > 0 and rng.random() < params.p_translate:
        cells = np.arange(-params.max_shift_cells, params.max_shift_cells + 1)
        dy, dx = (int(v) * grid for v in rng.choice(cells, size=2))
    box = None
    if rng.random() < params.p_cutmix:
        gh, gw = h // grid, w // grid
        bh = int(rng.integers(1, max(2, gh // 2 + 1)))
        bw = int(rng.integers(1, max(2, gw // 2 + 1)))
        y0 = int(rng.integers(0, gh - bh + 1))
        x0 = int(rng.integers(0, gw - bw + 1))
        box = (y0 * grid, x0 * grid, (y0 + bh) * grid, (x0 + bw) * grid)
    geom_s = GeomRecord(h, w, flip, dy, dx, box)

    fill = ignore_index(num_classes) if num_classes is not None else -1
    strong_img = _apply_geometry(strong_img, geom_s, 0.5)
    strong_mask = _apply_geometry(s.mask, geom_s, fill)
    if box is not None:
        # without a donor the sample's own 180-degree rotation is pasted
        d_img = donor.image if donor is not None else s.image[::-1, ::-1]
        d_mask = donor.mask if donor is not None else s.mask[::-1, ::-1]
        y0, x0, y1, x1 = box
        strong_img[y0:y1, x0:x1] = d_img[y0:y1, x0:x1]
        strong_mask[y0:y1, x0:x1] = d_mask[y0:y1, x0:x1]
    strong = Sample(strong_img.astype(np.float32), strong_mask, s.labeled, s.sample_id)
    return ViewTriplet(s, weak, strong, geom_w, geom_s)


def fill_ignore(mask: np.ndarray, num_classes: int) -> np.ndarray:
    out = mask.copy()
    out[out < 0] = ignore_index(num_classes)
    return out


# --------------------------------------------------------------------------
# splits and sampling


@dataclass
class SplitSpec:
    labeled_fraction: float = 0.05
    rare_class_boost: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.rare_class_boost < 1.0:
            raise ValueError("rare_class_boost must be >= 1")


@dataclass
class DataSplit:
    samples: list[Sample]
    labeled_ids: list[int]
    unlabeled_ids: list[int]
    num_classes: int
    spec: SplitSpec
    class_specs: list[ClassSpec] | None = None
    augment: AugmentParams = field(default_factory=AugmentParams)
    missing_classes: list[int] = field(default_factory=list)
    labeled_weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.labeled_ids:
            raise ValueError("labeled pool is empty")
        present = set()
        for i in self.labeled_ids:
            present |= set(np.unique(self.samples[i].mask).tolist())
        self.missing_classes = [c for c in range(self.num_classes) if c not in present]
        if self.missing_classes:
            log.warning("classes absent from the labeled pool: %s", self.missing_classes)
        self.labeled_weights = rarity_weights(
            [self.samples[i] for i in self.labeled_ids], self.num_classes,
            self.spec.rare_class_boost, self.class_specs)

    @property
    def labeled(self) -> list[Sample]:
        return [self.samples[i] for i in self.labeled_ids]

    @property
    def unlabeled(self) -> list[Sample]:
        return [self.samples[i] for i in self.unlabeled_ids]


def rarity_weights(samples: list[Sample], num_classes: int, boost: float,
                   class_specs: list[ClassSpec] | None = None) -> np.ndarray:
    """Image sampling weights ``1 + (boost - 1) * max_c rarity_c`` over present classes.

    Class rarity is the inverse image frequency in the pool times the class
    spec's ``rarity_weight``, normalised to a maximum of one.
    """
    presence = np.zeros((len(samples), num_classes), dtype=bool)
    for i, s in enumerate(samples):
        ids = np.unique(s.mask)
        ids = ids[(ids >= 0) & (ids < num_classes)]
        presence[i, ids] = True
    freq = presence.mean(axis=0)
    rarity = np.where(freq > 0, 1.0 / np.maximum(freq, 1e-12), 0.0)
    if class_specs is not None:
        rarity = rarity * np.array([c.rarity_weight for c in class_specs])
    if rarity.max() > 0:
        rarity = rarity / rarity.max()
    per_image = np.where(presence, rarity[None, :], 0.0).max(axis=1)
    return 1.0 + (boost - 1.0) * per_image


def make_split(samples: list[Sample], num_classes: int, spec: SplitSpec, seed: int,
               class_specs: list[ClassSpec] | None = None, augment: AugmentParams | None = None) -> DataSplit:
    rng = np.random.default_rng(stream_seed(seed, "split"))
    n = len(samples)
    n_lab = max(1, int(round(spec.labeled_fraction * n)))
    order = rng.permutation(n)
    labeled = sorted(order[:n_lab].tolist())
    if n_lab >= n:
        unlabeled = list(range(n))  # full set reused as the unlabeled pool
    else:
        unlabeled = sorted(order[n_lab:].tolist())
    for i in labeled:
        samples[i].labeled = True
    for i in unlabeled:
        if i not in labeled:
            samples[i].labeled = False
    return DataSplit(samples, labeled, unlabeled, num_classes, spec, class_specs, augment or AugmentParams())


def sample_batch(split: DataSplit, it: int, seed: int, n_labeled: int = 8, n_unlabeled: int = 8
                 ) -> tuple[list[Sample], list[ViewTriplet]]:
    rng = np.random.default_rng(stream_seed(seed, f"batch:{it}"))
    w = split.labeled_weights
    lab_idx = rng.choice(len(split.labeled_ids), size=n_labeled, replace=True, p=w / w.sum())
    labeled = [split.samples[split.labeled_ids[i]] for i in lab_idx]
    triplets = []
    if n_unlabeled > 0 and split.unlabeled_ids:
        un_idx = rng.integers(0, len(split.unlabeled_ids), size=n_unlabeled)
        donors = rng.integers(0, len(split.unlabeled_ids), size=n_unlabeled)
        view_seed = int(rng.integers(0, 2**31 - 1))
        for j, (i, d) in enumerate(zip(un_idx, donors)):
            s = split.samples[split.unlabeled_ids[i]]
            donor = split.samples[split.unlabeled_ids[d]]
            triplets.append(make_views(s, view_seed + j, donor, split.augment, split.num_classes))
    return labeled, triplets


# --------------------------------------------------------------------------
# tensors


def images_to_tensor(images: list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.as_tensor(arr, dtype=dtype)


def masks_to_tensor(masks: list[np.ndarray], num_classes: int) -> torch.Tensor:
    arr = np.stack([fill_ignore(m, num_classes) for m in masks])
    return torch.as_tensor(arr, dtype=torch.long)


def presence_targets(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``[B, H, W]`` class-id masks -> ``[B, K]`` multi-label presence."""
    out = torch.zeros(mask.shape[0], num_classes, dtype=torch.float32)
    for b in range(mask.shape[0]):
        ids = torch.unique(mask[b])
        ids = ids[(ids >= 0) & (ids < num_classes)]
        out[b, ids] = 1.0
    return out


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(mask[:, None].float(), size=size, mode="nearest")[:, 0].long()


# --------------------------------------------------------------------------
# on-disk layout


def save_dataset(root: str, samples: list[Sample], class_specs: list[ClassSpec],
                 splits: dict[str, list[str]] | None = None) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    k = len(class_specs)
    for s in samples:
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="RGB").save(
            os.path.join(root, "images", f"{s.sample_id}.ppm"))
        Image.fromarray(fill_ignore(s.mask, k).astype(np.uint8), mode="L").save(
            os.path.join(root, "masks", f"{s.sample_id}.pgm"))
    meta = {
        "num_classes": k,
        "ignore_index": ignore_index(k),
        "classes": [
            {"class_id": c.class_id, "name": c.name, "attributes": c.attributes, "rarity_weight": c.rarity_weight}
            for c in class_specs
        ],
    }
    with open(os.path.join(root, "dataset.meta"), "w") as fh:
        json.dump(meta, fh, indent=2)
    for name, ids in (splits or {}).items():
        with open(os.path.join(root, f"{name}.txt"), "w") as fh:
            fh.write("\n".join(ids) + ("\n" if ids else ""))


def load_class_specs(root: str) -> list[ClassSpec]:
    with open(os.path.join(root, "dataset.meta")) as fh:
        meta = json.load(fh)
    return [ClassSpec(**c) for c in meta["classes"]]


def read_split(root: str, name: str) -> list[str]:
    with open(os.path.join(root, f"{name}.txt")) as fh:
        return [line.strip() for line in fh if line.strip()]


def load_dataset(root: str, ids: list[str] | None = None) -> tuple[list[Sample], list[ClassSpec]]:
    """Read ``images/<id>.ppm`` and ``masks/<id>.pgm``; 8-bit images are rescaled to [0, 1]."""
    specs = load_class_specs(root)
    if ids is None:
        ids = sorted(os.path.splitext(f)[0] for f in os.listdir(os.path.join(root, "images")))
    samples = []
    for sid in ids:
        img = np.asarray(Image.open(os.path.join(root, "images", f"{sid}.ppm")).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(os.path.join(root, "masks", f"{sid}.pgm")), dtype=np.int64)
        samples.append(Sample(img, mask.copy(), True, sid))
    return samples, specs


def default_specs_for(cfg: ModelConfig, dataset: str = "toy") -> list[ClassSpec]:
    return default_class_specs(cfg.num_classes, dataset)
