"""Seeded synthetic detection scenes, paste compositing, and dataset file I/O.

Scenes are small RGB rasters populated with colored shapes, one category
per palette color.  Rendering difficulty (color jitter, occluders,
per-object and per-image noise, distractor blobs) is tuned so that a
linear classifier on coarse color statistics is useful but imperfect.
All randomness derives from the scene spec's seed, so generation is a
pure function of the spec.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, iou
from .seeding import derive_seed

SPLITS = ("train-labeled", "unlabeled", "test")

DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"
FORMAT_VERSION = 1

# Consecutive categories share a hue and differ only by shape, so the
# color statistics that dominate the toy features leave same-hue pairs
# genuinely confusable; the shape cue lives in weaker cell-occupancy
# patterns that noise and occlusion erode.
_HUE_PALETTE = (
    (204, 44, 44),    # red
    (40, 168, 88),    # green
    (56, 64, 200),    # blue
    (218, 160, 32),   # amber
    (150, 48, 182),   # purple
    (32, 158, 158),   # teal
)

_SHAPE_KINDS = ("square", "circle", "triangle", "diamond", "cross")


class SceneSpecError(ValueError):
    """The scene spec cannot produce a valid dataset."""


class CropTooLargeError(ValueError):
    """No placement of the crop fits inside the target image."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed."""


class VersionMismatchError(DatasetFormatError):
    """A dataset file was written with an unsupported format version."""


@dataclass(frozen=True)
class SceneSpec:
    num_categories: int = 5
    train_labeled: int = 20
    unlabeled: int = 30
    test: int = 10
    width: int = 64
    height: int = 64
    shapes_per_image: tuple[int, int] = (2, 4)
    # The pre-annotated split is sparse: a data-starved initial detector
    # is what makes mining the dense unlabeled pool worthwhile.
    labeled_shapes_per_image: tuple[int, int] = (1, 2)
    object_size: tuple[int, int] = (12, 16)
    # Fraction of objects drawn tall (aspect ~1:2.5).  The proposal grid
    # has no tall windows, so these are only detectable once the box
    # regressor has learned the vertical expansion from annotated boxes.
    tall_rate: float = 0.45
    palette: tuple[tuple[int, int, int], ...] | None = None
    color_jitter: float = 0.12
    max_noise: float = 0.55
    max_occlusion: float = 0.3
    image_noise: float = 9.0
    distractor_density: float = 1.0
    # Hard examples (a second category's color on half the shape) are rare
    # in the initially annotated split and common elsewhere, mirroring the
    # long tail that sample mining is meant to dig out of the unlabeled pool.
    confuser_rate: float = 0.3
    confuser_rate_labeled: float = 0.05
    # Rendering difficulty multiplier for the train-labeled split: the
    # pre-annotated images are the easy examples.
    labeled_difficulty: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_categories < 2:
            raise SceneSpecError("need at least 2 categories")
        if min(self.train_labeled, self.unlabeled, self.test) < 1:
            raise SceneSpecError("every split needs at least 1 image")
        if self.width < 8 or self.height < 8:
            raise SceneSpecError("image dimensions too small")
        for field_name in ("shapes_per_image", "labeled_shapes_per_image"):
            lo, hi = getattr(self, field_name)
            if lo < 1 or hi < lo:
                raise SceneSpecError(f"bad {field_name} range {(lo, hi)}")
        slo, shi = self.object_size
        if slo < 4 or shi < slo:
            raise SceneSpecError(f"bad object size range {self.object_size}")
        if shi > min(self.width, self.height):
            raise SceneSpecError(
                f"object size {shi} cannot fit a {self.width}x{self.height} image"
            )
        if self.palette is not None and len(self.palette) != self.num_categories:
            raise SceneSpecError("palette length must equal num_categories")

    def category_color(self, category: int) -> tuple[int, int, int]:
        if self.palette is not None:
            return tuple(self.palette[category])
        hue = category // 2  # consecutive categories share a hue
        if hue < len(_HUE_PALETTE):
            return _HUE_PALETTE[hue]
        # Extend deterministically around the hue wheel for large m.
        angle = 2.0 * np.pi * (hue + 0.5) / max(1, (self.num_categories + 1) // 2)
        rgb = 128 + 100 * np.array(
            [np.cos(angle), np.cos(angle - 2.1), np.cos(angle + 2.1)]
        )
        return tuple(int(c) for c in np.clip(rgb, 0, 255))

    def category_shape(self, category: int) -> str:
        return _SHAPE_KINDS[category % len(_SHAPE_KINDS)]

    def to_json(self) -> dict:
        return {
            "num_categories": self.num_categories,
            "train_labeled": self.train_labeled,
            "unlabeled": self.unlabeled,
            "test": self.test,
            "width": self.width,
            "height": self.height,
            "shapes_per_image": list(self.shapes_per_image),
            "labeled_shapes_per_image": list(self.labeled_shapes_per_image),
            "object_size": list(self.object_size),
            "palette": None if self.palette is None else [list(c) for c in self.palette],
            "color_jitter": self.color_jitter,
            "max_noise": self.max_noise,
            "max_occlusion": self.max_occlusion,
            "image_noise": self.image_noise,
            "distractor_density": self.distractor_density,
            "tall_rate": self.tall_rate,
            "confuser_rate": self.confuser_rate,
            "confuser_rate_labeled": self.confuser_rate_labeled,
            "labeled_difficulty": self.labeled_difficulty,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["shapes_per_image"] = tuple(data["shapes_per_image"])
        if "labeled_shapes_per_image" in data:
            data["labeled_shapes_per_image"] = tuple(data["labeled_shapes_per_image"])
        data["object_size"] = tuple(data["object_size"])
        if data.get("palette") is not None:
            data["palette"] = tuple(tuple(c) for c in data["palette"])
        return cls(**data)


@dataclass
class GroundTruthObject:
    box: BoundingBox
    category: int
    occluder_level: float = 0.0
    noise_level: float = 0.0

    def to_json(self) -> dict:
        return {
            "box": self.box.to_json(),
            "category": self.category,
            "occluder_level": self.occluder_level,
            "noise_level": self.noise_level,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruthObject":
        return cls(
            box=BoundingBox.from_json(data["box"]),
            category=data["category"],
            occluder_level=data.get("occluder_level", 0.0),
            noise_level=data.get("noise_level", 0.0),
        )


@dataclass(eq=False)
class SyntheticImage:
    id: str
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    objects: list[GroundTruthObject]
    split: str

    def __eq__(self, other):
        if not isinstance(other, SyntheticImage):
            return NotImplemented
        return (
            self.id == other.id
            and self.width == other.width
            and self.height == other.height
            and self.split == other.split
            and self.objects == other.objects
            and np.array_equal(self.pixels, other.pixels)
        )

    def crop(self, box: BoundingBox) -> np.ndarray:
        return self.pixels[box.y_min : box.y_max, box.x_min : box.x_max]

    def has_category(self, category: int) -> bool:
        return any(obj.category == category for obj in self.objects)


@dataclass(eq=False)
class Dataset:
    spec: SceneSpec
    images: list[SyntheticImage]
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {img.id: img for img in self.images}

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.spec == other.spec and self.images == other.images

    def split(self, name: str) -> list[SyntheticImage]:
        return [img for img in self.images if img.split == name]

    def image(self, image_id: str) -> SyntheticImage:
        return self._by_id[image_id]

    def has_image(self, image_id: str) -> bool:
        return image_id in self._by_id


def _shape_field(kind, h, w, angle=0.0):
    """Continuous inside-field g with g <= 1 inside the shape.

    The coordinate frame is rotated by `angle`, so class identity cannot
    be read off a fixed cell-occupancy template.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    px = (xx - cx) / (w / 2.0)
    py = (yy - cy) / (h / 2.0)
    if angle:
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        px, py = cos_a * px - sin_a * py, sin_a * px + cos_a * py
    u = np.abs(px)
    v = np.abs(py)
    if kind == "square":
        return np.maximum(u, v)
    if kind == "circle":
        return np.sqrt(u * u + v * v)
    if kind == "triangle":
        # Upward triangle: row y spans the middle fraction y/h of the width.
        half_width = np.maximum((py + 1.0) / 2.0, 1e-6)
        return np.maximum(u / np.maximum(2.0 * half_width, 1e-6), v)
    if kind == "diamond":
        return u + v
    # cross: inside when either arm covers the pixel
    return np.minimum(u * 3.0, v * 3.0)


def _draw_shape(pixels, box, kind, color, rng, jitter, morph_kind=None,
                morph_weight=0.5, angle=0.0):
    h, w = box.height, box.width
    field = _shape_field(kind, h, w, angle)
    if morph_kind is not None:
        # Hard example: geometry interpolated toward the paired category's
        # shape, at full category color.  The hue keeps both same-hue
        # classifiers interested; the in-between outline gives neither a
        # decisive cue.
        field = morph_weight * field + (1.0 - morph_weight) * _shape_field(
            morph_kind, h, w, angle
        )
    mask = field <= 1.0
    shade = np.clip(
        np.array(color, dtype=np.float64) * (1.0 + rng.normal(0.0, jitter, size=3)),
        0,
        255,
    )
    region = pixels[box.y_min : box.y_max, box.x_min : box.x_max]
    region[mask] = shade.astype(np.uint8)


def _place_box(rng, spec, existing, tall=False, tries=200):
    """Sample a box that fits the canvas and overlaps existing boxes with IoU < 0.3."""
    slo, shi = spec.object_size
    for _ in range(tries):
        if tall:
            w = int(rng.integers(max(5, round(slo * 0.55)), max(6, round(slo * 0.8))))
            h = int(rng.integers(round(shi * 1.2), min(round(shi * 1.6), spec.height) + 1))
        else:
            h = int(rng.integers(slo, shi + 1))
            w = int(np.clip(round(h * rng.uniform(0.75, 1.33)), slo, shi))
        if w > spec.width or h > spec.height:
            continue
        x0 = int(rng.integers(0, spec.width - w + 1))
        y0 = int(rng.integers(0, spec.height - h + 1))
        box = BoundingBox(x0, y0, x0 + w, y0 + h)
        if all(iou(box, other) < 0.3 for other in existing):
            return box
    return None


def _render_image(spec, split, index, categories, rng) -> SyntheticImage:
    base = rng.integers(96, 150, size=3)
    pixels = np.tile(base.astype(np.float64), (spec.height, spec.width, 1))
    pixels += rng.normal(0.0, 4.0, size=pixels.shape)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)

    labeled = split == "train-labeled"
    confuser_rate = spec.confuser_rate_labeled if labeled else spec.confuser_rate
    difficulty = spec.labeled_difficulty if labeled else 1.0
    objects = []
    placed = []
    for category in categories:
        tall = rng.random() < spec.tall_rate
        box = _place_box(rng, spec, placed, tall=tall)
        if box is None and tall:
            box = _place_box(rng, spec, placed)
        if box is None:
            raise SceneSpecError(
                f"cannot place {len(categories)} objects of size "
                f"{spec.object_size} on a {spec.width}x{spec.height} canvas"
            )
        placed.append(box)
        kind = spec.category_shape(category)
        morph_kind = None
        morph_weight = 0.5
        partner = category ^ 1  # same-hue partner under the paired palette
        if partner < spec.num_categories and rng.random() < confuser_rate:
            morph_kind = spec.category_shape(partner)
            morph_weight = float(rng.uniform(0.35, 0.65))
        angle = float(rng.uniform(0.0, np.pi))
        _draw_shape(
            pixels, box, kind, spec.category_color(category), rng,
            spec.color_jitter, morph_kind=morph_kind, morph_weight=morph_weight,
            angle=angle,
        )
        occ = float(rng.uniform(0.0, spec.max_occlusion * difficulty))
        noise = float(rng.uniform(0.0, spec.max_noise * difficulty))
        if occ > 0.02:
            ow = max(1, int(round(box.width * occ)))
            oh = max(1, int(round(box.height * occ)))
            ox = box.x_min + int(rng.integers(0, box.width - ow + 1))
            oy = box.y_min + int(rng.integers(0, box.height - oh + 1))
            pixels[oy : oy + oh, ox : ox + ow] = rng.integers(70, 170, size=3)
        if noise > 0:
            region = pixels[box.y_min : box.y_max, box.x_min : box.x_max].astype(np.float64)
            region += rng.normal(0.0, noise * 46.0, size=region.shape)
            pixels[box.y_min : box.y_max, box.x_min : box.x_max] = np.clip(
                region, 0, 255
            ).astype(np.uint8)
        objects.append(GroundTruthObject(box, category, occ, noise))

    for _ in range(int(rng.poisson(spec.distractor_density))):
        box = _place_box(rng, spec, placed)
        if box is None:
            break
        placed.append(box)
        gray = int(rng.integers(60, 200))
        tint = np.clip(gray + rng.integers(-25, 26, size=3), 0, 255)
        kind = _SHAPE_KINDS[int(rng.integers(0, len(_SHAPE_KINDS)))]
        _draw_shape(pixels, box, kind, tuple(int(c) for c in tint), rng, 0.10)

    noisy = pixels.astype(np.float64) + rng.normal(0.0, spec.image_noise, size=pixels.shape)
    pixels = np.clip(noisy, 0, 255).astype(np.uint8)
    return SyntheticImage(
        id=f"{split}-{index:04d}",
        width=spec.width,
        height=spec.height,
        pixels=pixels,
        objects=objects,
        split=split,
    )


def generate_dataset(spec: SceneSpec) -> Dataset:
    """Render all three splits deterministically from the spec."""
    spec.validate()
    images = []
    for split, count in (
        ("train-labeled", spec.train_labeled),
        ("unlabeled", spec.unlabeled),
        ("test", spec.test),
    ):
        split_rng = np.random.default_rng(derive_seed(spec.seed, "split", split))
        if split == "train-labeled":
            lo, hi = spec.labeled_shapes_per_image
        else:
            lo, hi = spec.shapes_per_image
        counts = [int(split_rng.integers(lo, hi + 1)) for _ in range(count)]
        if sum(counts) < spec.num_categories:
            raise SceneSpecError(
                f"split {split}: {sum(counts)} objects cannot cover "
                f"{spec.num_categories} categories"
            )
        # Guarantee every category appears in the split, then fill the
        # remaining slots at random.
        assignments = [[] for _ in range(count)]
        cursor = 0
        for category in range(spec.num_categories):
            while len(assignments[cursor % count]) >= counts[cursor % count]:
                cursor += 1
            assignments[cursor % count].append(category)
            cursor += 1
        for i in range(count):
            while len(assignments[i]) < counts[i]:
                assignments[i].append(int(split_rng.integers(0, spec.num_categories)))
        for i in range(count):
            rng = np.random.default_rng(derive_seed(spec.seed, "image", split, i))
            images.append(_render_image(spec, split, i, assignments[i], rng))
    return Dataset(spec=spec, images=images)


def paste(
    source: SyntheticImage,
    crop: BoundingBox,
    target: SyntheticImage,
    seed: int,
) -> tuple[SyntheticImage, BoundingBox]:
    """Copy the source crop into the target at a seeded uniform placement.

    The target's ground-truth list is carried over untouched: the pasted
    object is unannotated by construction.
    """
    if crop.x_max > source.width or crop.y_max > source.height:
        raise ValueError(f"crop {crop.as_tuple()} exceeds source image bounds")
    ch, cw = crop.height, crop.width
    max_x = target.width - cw
    max_y = target.height - ch
    if max_x < 0 or max_y < 0:
        raise CropTooLargeError(
            f"{cw}x{ch} crop cannot fit a {target.width}x{target.height} image"
        )
    rng = np.random.default_rng(seed)
    dx = int(rng.integers(0, max_x + 1))
    dy = int(rng.integers(0, max_y + 1))
    pixels = target.pixels.copy()
    pixels[dy : dy + ch, dx : dx + cw] = source.crop(crop)
    placed = BoundingBox(dx, dy, dx + cw, dy + ch)
    composited = SyntheticImage(
        id=f"{target.id}+paste",
        width=target.width,
        height=target.height,
        pixels=pixels,
        objects=list(target.objects),
        split=target.split,
    )
    return composited, placed


def _image_to_json(img: SyntheticImage) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "id": img.id,
        "split": img.split,
        "width": img.width,
        "height": img.height,
        "pixels": base64.b64encode(img.pixels.tobytes()).decode("ascii"),
        "objects": [{"box": o.box.to_json(), "category": o.category,
                     "occluder_level": o.occluder_level, "noise_level": o.noise_level}
                    for o in img.objects],
    }


def _image_from_json(data: dict) -> SyntheticImage:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format_version {version!r}")
    raw = base64.b64decode(data["pixels"])
    expected = data["height"] * data["width"] * 3
    if len(raw) != expected:
        raise DatasetFormatError(
            f"pixel payload has {len(raw)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(data["height"], data["width"], 3)
    return SyntheticImage(
        id=data["id"],
        width=data["width"],
        height=data["height"],
        pixels=pixels.copy(),
        objects=[GroundTruthObject.from_json(o) for o in data["objects"]],
        split=data["split"],
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write dataset.jsonl plus the manifest.json sidecar into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / DATASET_FILE, "w", encoding="utf-8") as fh:
        for img in dataset.images:
            fh.write(json.dumps(_image_to_json(img), sort_keys=True) + "\n")
    manifest = {"format_version": FORMAT_VERSION, "scene_spec": dataset.spec.to_json()}
    with open(path / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    dataset_path = path / DATASET_FILE
    if not manifest_path.exists() or not dataset_path.exists():
        raise DatasetFormatError(f"{path} does not contain a dataset")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported manifest format_version {manifest.get('format_version')!r}"
        )
    spec = SceneSpec.from_json(manifest["scene_spec"])
    images = []
    with open(dataset_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                images.append(_image_from_json(data))
            except VersionMismatchError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    return Dataset(spec=spec, images=images)


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
