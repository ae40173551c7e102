"""Datasets: in-memory manifests, image-folder ingestion, class splits and
the procedural glyph dataset used for desk-scale experiments."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm"}
PROVENANCES = ("canonical", "estimated")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    class_id: int
    sample_id: str


@dataclass(frozen=True)
class ExemplarImage:
    pixels: np.ndarray
    class_id: int
    provenance: str = "canonical"
    source: str | None = None  # sample_id the exemplar was picked from, if any

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown exemplar provenance {self.provenance!r}")


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Immutable collection of labelled images plus optional class exemplars.

    ``samples`` maps each class id to the ordered sample ids of that class and
    ``pixels`` stacks every image in that same (class, sample) order, so row
    lookups are cheap during episode sampling.
    """

    name: str
    image_size: tuple[int, int]
    samples: Mapping[int, tuple[str, ...]]
    pixels: np.ndarray
    exemplars: Mapping[int, ExemplarImage] = field(default_factory=dict)
    class_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        samples = {int(c): tuple(ids) for c, ids in sorted(self.samples.items())}
        for c, ids in samples.items():
            if not ids:
                raise DataError(f"class {self.class_names.get(c, c)} has no samples")
        rows, labels = {}, []
        for c, ids in samples.items():
            for sid in ids:
                if sid in rows:
                    raise DataError(f"duplicate sample id {sid!r}")
                rows[sid] = len(labels)
                labels.append(c)
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        h, w = self.image_size
        if pixels.shape != (len(labels), 3, h, w):
            raise DataError(
                f"pixel array has shape {pixels.shape}, expected {(len(labels), 3, h, w)}")
        pixels.setflags(write=False)
        for c, ex in self.exemplars.items():
            if c not in samples:
                raise DataError(f"exemplar supplied for unknown class {c}")
            if ex.pixels.shape != (3, h, w):
                raise DataError(f"exemplar for class {c} has shape {ex.pixels.shape}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "image_size", (int(h), int(w)))
        object.__setattr__(self, "exemplars", dict(sorted(self.exemplars.items())))
        object.__setattr__(self, "class_names", dict(self.class_names))
        object.__setattr__(self, "_rows", rows)
        object.__setattr__(self, "_labels", np.asarray(labels, dtype=np.int64))

    @property
    def class_ids(self) -> list[int]:
        return list(self.samples)

    @property
    def num_samples(self) -> int:
        return len(self._labels)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    def row(self, sample_id: str) -> int:
        return self._rows[sample_id]

    def rows(self, sample_ids) -> np.ndarray:
        return np.asarray([self._rows[s] for s in sample_ids], dtype=np.int64)

    def image(self, sample_id: str) -> LabeledImage:
        r = self._rows[sample_id]
        return LabeledImage(self.pixels[r], int(self._labels[r]), sample_id)

    def has_exemplars(self) -> bool:
        return len(self.exemplars) == len(self.samples)

    def exemplar_pixels(self, class_ids) -> np.ndarray:
        missing = [c for c in class_ids if c not in self.exemplars]
        if missing:
            raise DataError(f"no exemplar attached for classes {missing}")
        return np.stack([self.exemplars[c].pixels for c in class_ids])

    def subset(self, class_ids, name: str | None = None) -> DatasetManifest:
        keep = sorted(int(c) for c in class_ids)
        ids = [s for c in keep for s in self.samples[c]]
        return DatasetManifest(
            name=name or self.name,
            image_size=self.image_size,
            samples={c: self.samples[c] for c in keep},
            pixels=self.pixels[self.rows(ids)] if ids else np.zeros((0, 3, *self.image_size)),
            exemplars={c: e for c, e in self.exemplars.items() if c in keep},
            class_names={c: n for c, n in self.class_names.items() if c in keep},
        )

    def with_exemplars(self, exemplars: Mapping[int, ExemplarImage]) -> DatasetManifest:
        return DatasetManifest(self.name, self.image_size, self.samples, self.pixels,
                               exemplars, self.class_names)

    def pixels_digest(self) -> str:
        h = hashlib.sha256(self.pixels.tobytes())
        for c, ex in self.exemplars.items():
            h.update(str(c).encode())
            h.update(np.ascontiguousarray(ex.pixels, dtype=np.float32).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "image_size": list(self.image_size),
            "class_ids": self.class_ids,
            "class_names": {str(c): n for c, n in self.class_names.items()},
            "samples": {str(c): list(ids) for c, ids in self.samples.items()},
            "exemplars": {
                str(c): {"provenance": e.provenance, "source": e.source}
                for c, e in self.exemplars.items()
            },
            "pixels_sha256": self.pixels_digest(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def save_manifest(manifest: DatasetManifest, directory) -> Path:
    """Write ``manifest.json``, ``pixels.npy`` and ``exemplars.npy`` into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(manifest.to_json())
    np.save(directory / "pixels.npy", manifest.pixels)
    ex_ids = list(manifest.exemplars)
    ex = (manifest.exemplar_pixels(ex_ids) if ex_ids
          else np.zeros((0, 3, *manifest.image_size), dtype=np.float32))
    np.save(directory / "exemplars.npy", ex.astype(np.float32))
    return directory


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    meta = json.loads(path.read_text())
    pixels = np.load(directory / "pixels.npy")
    ex_pixels = np.load(directory / "exemplars.npy")
    exemplars = {}
    for i, (c, info) in enumerate(sorted(meta["exemplars"].items(), key=lambda kv: int(kv[0]))):
        exemplars[int(c)] = ExemplarImage(ex_pixels[i], int(c), info["provenance"], info["source"])
    manifest = DatasetManifest(
        name=meta["name"],
        image_size=tuple(meta["image_size"]),
        samples={int(c): tuple(ids) for c, ids in meta["samples"].items()},
        pixels=pixels,
        exemplars=exemplars,
        class_names={int(c): n for c, n in meta.get("class_names", {}).items()},
    )
    if manifest.pixels_digest() != meta["pixels_sha256"]:
        raise DataError(f"pixel data in {directory} does not match its manifest")
    return manifest


def load_image(path, image_size: tuple[int, int]) -> np.ndarray:
    """Decode an image file to a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        h, w = image_size
        if im.size != (w, h):
            im = im.resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def ingest_image_folder(root_path, image_size: tuple[int, int]) -> DatasetManifest:
    """Build a manifest from ``root/<class_name>/*`` with an optional
    ``root/exemplars/<class_name>.<ext>`` directory of canonical exemplars."""
    root = Path(root_path)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name != "exemplars")
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    names = {i: d.name for i, d in enumerate(class_dirs)}
    by_name = {n: i for i, n in names.items()}
    samples, arrays = {}, []
    for cid, d in enumerate(class_dirs):
        ids = []
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                arrays.append(load_image(f, image_size))
            except (OSError, ValueError) as exc:
                log.warning("skipping undecodable image %s: %s", f, exc)
                continue
            ids.append(f"{d.name}/{f.name}")
        if not ids:
            raise DataError(f"class {d.name} has no samples")
        samples[cid] = tuple(ids)

    exemplars = {}
    ex_dir = root / "exemplars"
    if ex_dir.is_dir():
        for f in sorted(ex_dir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if f.stem not in by_name:
                raise DataError(f"exemplar {f.name} does not match any class")
            cid = by_name[f.stem]
            exemplars[cid] = ExemplarImage(load_image(f, image_size), cid, "canonical",
                                           f"exemplars/{f.name}")
    return DatasetManifest(
        name=root.name,
        image_size=tuple(image_size),
        samples=samples,
        pixels=np.stack(arrays),
        exemplars=exemplars,
        class_names=names,
    )


def split_classes(manifest: DatasetManifest, train_fraction: float, seed: int,
                  n_way: int = 1) -> tuple[DatasetManifest, DatasetManifest]:
    """Class-disjoint train/test split.

    ``train_fraction == 1.0`` keeps every class for training (cross-dataset
    mode, where the test manifest comes from elsewhere) and returns an empty
    test manifest.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    classes = manifest.class_ids
    if train_fraction == 1.0:
        if len(classes) < n_way:
            raise DataError(f"{len(classes)} classes cannot support {n_way}-way tasks")
        return manifest, manifest.subset([], name=f"{manifest.name}-test")
    n_train = int(round(train_fraction * len(classes)))
    n_test = len(classes) - n_train
    if min(n_train, n_test) < n_way:
        raise DataError(
            f"split of {len(classes)} classes gives {n_train} train / {n_test} test; "
            f"both need at least {n_way} for {n_way}-way tasks")
    order = np.random.default_rng(seed).permutation(len(classes))
    train = sorted(classes[i] for i in order[:n_train])
    test = sorted(classes[i] for i in order[n_train:])
    return (manifest.subset(train, name=f"{manifest.name}-train"),
            manifest.subset(test, name=f"{manifest.name}-test"))


# --- procedural glyphs -------------------------------------------------------

_SHAPES = ("circle", "square", "triangle", "inverted_triangle", "diamond",
           "hexagon", "octagon", "pentagon")
_MARKS = ("none", "dot", "hbar", "vbar", "diagonal", "cross", "two_dots", "ring")
_COLORS = (
    (0.85, 0.10, 0.10),
    (0.10, 0.30, 0.80),
    (0.95, 0.75, 0.05),
    (0.10, 0.60, 0.20),
    (0.55, 0.15, 0.65),
    (0.95, 0.45, 0.05),
)
GLYPH_VOCABULARY = len(_SHAPES) * len(_MARKS)
_SUPERSAMPLE = 4


def _polygon(cx, cy, r, sides, rotation):
    return [(cx + r * math.cos(rotation + 2 * math.pi * k / sides),
             cy + r * math.sin(rotation + 2 * math.pi * k / sides)) for k in range(sides)]


def _glyph_layer(index: int, size: tuple[int, int]) -> Image.Image:
    """RGBA rendering (supersampled) of glyph ``index`` on a transparent canvas."""
    h, w = size[0] * _SUPERSAMPLE, size[1] * _SUPERSAMPLE
    shape = _SHAPES[index % len(_SHAPES)]
    mark = _MARKS[(index // len(_SHAPES)) % len(_MARKS)]
    color = _COLORS[(index + index // len(_SHAPES)) % len(_COLORS)]
    fill = tuple(int(255 * v) for v in color) + (255,)
    ink = (20, 20, 20, 255) if sum(color) > 1.2 else (245, 245, 245, 255)

    layer = Image.new("RGBA", (w, h), (0, 0, 0, 0))
    draw = ImageDraw.Draw(layer)
    cx, cy, r = w / 2, h / 2, 0.38 * min(w, h)
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        s = r * 0.85
        draw.rectangle([cx - s, cy - s, cx + s, cy + s], fill=fill)
    else:
        sides, rot = {
            "triangle": (3, -math.pi / 2),
            "inverted_triangle": (3, math.pi / 2),
            "diamond": (4, 0.0),
            "hexagon": (6, 0.0),
            "octagon": (8, math.pi / 8),
            "pentagon": (5, -math.pi / 2),
        }[shape]
        draw.polygon(_polygon(cx, cy, r, sides, rot), fill=fill)

    m = 0.42 * r  # mark extent, kept inside every shape's inscribed circle
    t = max(1.0, 0.12 * r)
    if mark == "dot":
        draw.ellipse([cx - t * 1.3, cy - t * 1.3, cx + t * 1.3, cy + t * 1.3], fill=ink)
    elif mark == "hbar":
        draw.rectangle([cx - m, cy - t / 2, cx + m, cy + t / 2], fill=ink)
    elif mark == "vbar":
        draw.rectangle([cx - t / 2, cy - m, cx + t / 2, cy + m], fill=ink)
    elif mark == "diagonal":
        draw.line([cx - m, cy + m, cx + m, cy - m], fill=ink, width=int(t))
    elif mark == "cross":
        draw.rectangle([cx - m, cy - t / 2, cx + m, cy + t / 2], fill=ink)
        draw.rectangle([cx - t / 2, cy - m, cx + t / 2, cy + m], fill=ink)
    elif mark == "two_dots":
        for dx in (-m * 0.6, m * 0.6):
            draw.ellipse([cx + dx - t, cy - t, cx + dx + t, cy + t], fill=ink)
    elif mark == "ring":
        draw.ellipse([cx - m, cy - m, cx + m, cy + m], outline=ink, width=int(t))
    return layer


def _composite(layer: Image.Image, background, size) -> np.ndarray:
    bg = Image.new("RGBA", layer.size, tuple(int(round(255 * v)) for v in background) + (255,))
    im = Image.alpha_composite(bg, layer).convert("RGB")
    im = im.resize((size[1], size[0]), Image.BOX)
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def render_glyph(index: int, image_size: tuple[int, int]) -> np.ndarray:
    """Clean rendering of glyph ``index`` on a white background."""
    return _composite(_glyph_layer(index, image_size), (1.0, 1.0, 1.0), image_size)


def perturb_glyph(layer: Image.Image, image_size, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(-15.0, 15.0)
    dx, dy = rng.uniform(-0.1, 0.1, size=2) * layer.size[0]
    moved = layer.rotate(angle, resample=Image.BILINEAR, translate=(dx, dy))
    background = np.clip(1.0 - rng.uniform(0.0, 0.45, size=3), 0.0, 1.0)
    img = _composite(moved, background, image_size)
    contrast = rng.uniform(0.7, 1.3)
    brightness = rng.uniform(-0.15, 0.15)
    img = (img - img.mean()) * contrast + img.mean() + brightness
    img = img + rng.normal(0.0, rng.uniform(0.01, 0.06), size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_glyph_dataset(num_classes: int, samples_per_class: int,
                           image_size: tuple[int, int] = (32, 32), seed: int = 0,
                           name: str = "glyphs") -> DatasetManifest:
    """Render ``num_classes`` distinct glyphs and perturbed samples of each.

    The clean render of each glyph is attached as its canonical exemplar. Each
    sample is drawn with a generator keyed on ``(seed, class, sample)`` so the
    output is a pure function of the arguments.
    """
    if num_classes < 2:
        raise ConfigError("glyph dataset needs at least 2 classes")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    if num_classes > GLYPH_VOCABULARY:
        raise ConfigError(
            f"only {GLYPH_VOCABULARY} distinct glyphs exist, {num_classes} requested")
    image_size = (int(image_size[0]), int(image_size[1]))
    samples, arrays, exemplars = {}, [], {}
    for c in range(num_classes):
        layer = _glyph_layer(c, image_size)
        exemplars[c] = ExemplarImage(_composite(layer, (1.0, 1.0, 1.0), image_size), c, "canonical")
        ids = []
        for k in range(samples_per_class):
            rng = np.random.default_rng([seed, c, k])
            arrays.append(perturb_glyph(layer, image_size, rng))
            ids.append(f"{name}-c{c:02d}-s{k:04d}")
        samples[c] = tuple(ids)
    return DatasetManifest(
        name=name,
        image_size=image_size,
        samples=samples,
        pixels=np.stack(arrays),
        exemplars=exemplars,
        class_names={c: f"{_SHAPES[c % 8]}-{_MARKS[(c // 8) % 8]}" for c in range(num_classes)},
    )
