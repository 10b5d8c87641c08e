"""Corrupted-MNIST synthesis, exemplary sets and on-disk dataset format."""
from __future__ import annotations

import enum
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import jsonschema
import numpy as np
from PIL import Image

from . import seeding
from .geom import Box, iou

CANVAS = 84
DIGIT = 28
ANNOTATION_VERSION = 1


class MissingSource(FileNotFoundError):
    pass


class InvalidCount(ValueError):
    pass


class PlacementExhausted(RuntimeError):
    pass


class SizeTooLarge(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


class DatasetIOError(OSError):
    pass


class NoiseKind(str, enum.Enum):
    NONE = "none"
    CLUTTER = "clutter"
    RANDOM_PATCH = "random_patch"
    GAUSSIAN = "gaussian"
    IMPULSE = "impulse"


class ExemplaryMode(str, enum.Enum):
    TRAIN_PAIRS = "train_pairs"
    TEST_CROPS = "test_crops"


@dataclass
class NoiseParams:
    clutter_patches: int = 8
    clutter_size: int = 6
    num_rect_patches: int = 6
    rect_min: int = 8
    rect_max: int = 20
    gaussian_sigma: float = 32.0
    impulse_p: float = 0.1


@dataclass(eq=False)
class ImageSample:
    image: np.ndarray
    gt_box: Optional[Box]
    label: int
    noise: NoiseKind
    id: str

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.noise == other.noise
                and self.gt_box == other.gt_box and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))


@dataclass(eq=False)
class TwoDigitSample:
    image: np.ndarray
    boxes: Dict[int, Box]
    id: str
    noise: NoiseKind = NoiseKind.RANDOM_PATCH

    def __eq__(self, other):
        if not isinstance(other, TwoDigitSample):
            return NotImplemented
        return (self.id == other.id and self.boxes == other.boxes and self.noise == other.noise
                and np.array_equal(self.image, other.image))

    def query(self, digit: int) -> ImageSample:
        """View this image as a single-object sample whose target is ``digit``."""
        return ImageSample(self.image, self.boxes[digit], digit, self.noise, f"{self.id}-q{digit}")


@dataclass
class ExemplarySet:
    mode: ExemplaryMode
    entries: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.entries)

    def crops(self) -> List[np.ndarray]:
        if self.mode == ExemplaryMode.TEST_CROPS:
            return list(self.entries)
        return [crop(s.image, s.gt_box) for s in self.entries]


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    return image[y0:y1, x0:x1].copy()


def strip_boxes(samples: Sequence[ImageSample]) -> List[ImageSample]:
    """Copies of ``samples`` without ground truth, for annotation-free adaptation."""
    return [ImageSample(s.image, None, s.label, s.noise, s.id) for s in samples]


# ---------------------------------------------------------------------------
# MNIST source


def data_root(root: Union[str, Path, None] = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get("ORDLOC_DATA_DIR", "data"))


@dataclass
class MnistSource:
    """Raw 28x28 digits per split, as uint8 arrays."""

    images: Dict[str, np.ndarray]
    labels: Dict[str, np.ndarray]

    def digits(self, split: str, digit: int) -> np.ndarray:
        return self.images[split][self.labels[split] == digit]

    def save(self, root: Union[str, Path, None] = None) -> Path:
        path = data_root(root) / "mnist.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, x_train=self.images["train"], y_train=self.labels["train"],
                            x_test=self.images["test"], y_test=self.labels["test"])
        return path

    @classmethod
    def load(cls, root: Union[str, Path, None] = None) -> "MnistSource":
        path = data_root(root) / "mnist.npz"
        if not path.exists():
            raise MissingSource(f"{path} not found; run `ordloc ingest-mnist` first")
        with np.load(path) as z:
            return cls({"train": z["x_train"], "test": z["x_test"]},
                       {"train": z["y_train"], "test": z["y_test"]})


def _open_maybe_gz(path: Path):
    path = Path(path)
    if not path.exists():
        raise MissingSource(str(path))
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an IDX file (optionally gzipped) with unsigned-byte payload."""
    with _open_maybe_gz(Path(path)) as f:
        zero, dtype, ndim = struct.unpack(">HBB", f.read(4))
        if zero != 0 or dtype != 0x08:
            raise SchemaMismatch(f"{path}: not an unsigned-byte IDX file")
        shape = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(shape)


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


def ingest_idx(train_images, train_labels, test_images, test_labels,
               root: Union[str, Path, None] = None) -> Path:
    src = MnistSource({"train": read_idx(train_images), "test": read_idx(test_images)},
                      {"train": read_idx(train_labels), "test": read_idx(test_labels)})
    return src.save(root)


def ingest_csv(path: Union[str, Path], root: Union[str, Path, None] = None,
               test_per_digit: int = 100) -> Path:
    """Ingest a CSV of 784 pixel columns followed by the label (the mlxtend 5k subset layout).

    The file has no train/test split, so the last ``test_per_digit`` rows of each
    digit become the test split.
    """
    with _open_maybe_gz(Path(path)) as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.float64)
    x = table[:, :-1].astype(np.uint8).reshape(-1, DIGIT, DIGIT)
    y = table[:, -1].astype(np.uint8)
    test = np.zeros(len(y), dtype=bool)
    for d in np.unique(y):
        idx = np.flatnonzero(y == d)
        test[idx[-test_per_digit:]] = True
    src = MnistSource({"train": x[~test], "test": x[test]}, {"train": y[~test], "test": y[test]})
    return src.save(root)


def bundled_csv_path() -> Path:
    """Location of the MNIST subset shipped inside the ``mlxtend`` wheel."""
    try:
        import mlxtend
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise MissingSource("mlxtend is not installed; pass IDX files instead") from exc
    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


# ---------------------------------------------------------------------------
# Synthesis


def _paint_noise(canvas: np.ndarray, background: np.ndarray, noise: NoiseKind,
                 rng: np.random.Generator, params: NoiseParams, clutter_pool: np.ndarray | None) -> np.ndarray:
    """Return ``canvas`` with noise written to pixels where ``background`` is True."""
    out = canvas.astype(np.float64)
    h, w = canvas.shape
    if noise == NoiseKind.NONE:
        return canvas
    if noise == NoiseKind.CLUTTER:
        layer = np.zeros_like(out)
        k = params.clutter_size
        for _ in range(params.clutter_patches):
            src = clutter_pool[rng.integers(len(clutter_pool))]
            # crop from the central region so the fragment carries stroke pixels
            cy, cx = rng.integers(4, DIGIT - 4 - k + 1, size=2)
            py, px = rng.integers(0, h - k + 1), rng.integers(0, w - k + 1)
            layer[py:py + k, px:px + k] = np.maximum(layer[py:py + k, px:px + k], src[cy:cy + k, cx:cx + k])
        out = np.where(background, np.maximum(out, layer), out)
    elif noise == NoiseKind.RANDOM_PATCH:
        layer = np.zeros_like(out)
        for _ in range(params.num_rect_patches):
            ph, pw = rng.integers(params.rect_min, params.rect_max + 1, size=2)
            py, px = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
            layer[py:py + ph, px:px + pw] = rng.integers(0, 256)
        out = np.where(background, np.maximum(out, layer), out)
    elif noise == NoiseKind.GAUSSIAN:
        out = np.where(background, out + rng.normal(0.0, params.gaussian_sigma, out.shape), out)
    elif noise == NoiseKind.IMPULSE:
        flip = rng.random(out.shape) < params.impulse_p
        salt = rng.random(out.shape) < 0.5
        out = np.where(background & flip, np.where(salt, 255.0, 0.0), out)
    else:
        raise ValueError(f"unknown noise {noise}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _background_mask(boxes: Sequence[Box]) -> np.ndarray:
    mask = np.ones((CANVAS, CANVAS), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = (int(v) for v in b)
        mask[y0:y1, x0:x1] = False
    return mask


def _place(canvas: np.ndarray, digit_img: np.ndarray, x: int, y: int) -> Box:
    canvas[y:y + DIGIT, x:x + DIGIT] = digit_img
    return Box(float(x), float(y), float(x + DIGIT), float(y + DIGIT))


def synth_cmnist(digit: int, count: int, noise: NoiseKind | str, source_split: str = "train",
                 seed: int = 0, source: MnistSource | None = None, replace: bool = True,
                 params: NoiseParams | None = None) -> List[ImageSample]:
    """Place ``count`` digits on 84x84 canvases and corrupt the background.

    With ``replace=False`` the source digits are drawn without repetition, so
    ``count`` may not exceed the number of available digits.
    """
    noise = NoiseKind(noise)
    source = source if source is not None else MnistSource.load()
    params = params or NoiseParams()
    pool = source.digits(source_split, digit)
    if count < 0:
        raise InvalidCount("count must be non-negative")
    if not replace and count > len(pool):
        raise InvalidCount(f"{count} digits requested, only {len(pool)} available")
    pick_rng = seeding.rng(seed, "cmnist-pick", digit, source_split)
    picks = pick_rng.choice(len(pool), size=count, replace=replace)
    others = source.images[source_split][source.labels[source_split] != digit]
    samples = []
    for i, j in enumerate(picks):
        r = seeding.rng(seed, "cmnist", digit, noise.value, source_split, i)
        canvas = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
        x, y = (int(v) for v in r.integers(0, CANVAS - DIGIT + 1, size=2))
        box = _place(canvas, pool[j], x, y)
        canvas = _paint_noise(canvas, _background_mask([box]), noise, r, params, others)
        samples.append(ImageSample(canvas, box, int(digit), noise,
                                   f"{source_split}-d{digit}-{noise.value}-s{seed}-{i:05d}"))
    return samples


def synth_two_digit(count: int, seed: int = 0, source: MnistSource | None = None,
                    source_split: str = "train", digits=(3, 4), max_attempts: int = 100,
                    params: NoiseParams | None = None) -> List[TwoDigitSample]:
    source = source if source is not None else MnistSource.load()
    params = params or NoiseParams()
    pools = {d: source.digits(source_split, d) for d in digits}
    others = source.images[source_split]
    samples = []
    for i in range(count):
        r = seeding.rng(seed, "two-digit", source_split, i)
        for _ in range(max_attempts):
            pos = r.integers(0, CANVAS - DIGIT + 1, size=(len(digits), 2))
            boxes = [Box(float(x), float(y), float(x + DIGIT), float(y + DIGIT)) for x, y in pos]
            if all(iou(a, b) == 0 for k, a in enumerate(boxes) for b in boxes[k + 1:]):
                break
        else:
            raise PlacementExhausted(f"sample {i}: no disjoint placement in {max_attempts} attempts")
        canvas = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
        for d, b in zip(digits, boxes):
            _place(canvas, pools[d][r.integers(len(pools[d]))], int(b.x_min), int(b.y_min))
        canvas = _paint_noise(canvas, _background_mask(boxes), NoiseKind.RANDOM_PATCH, r, params, others)
        samples.append(TwoDigitSample(canvas, dict(zip(digits, boxes)),
                                      f"{source_split}-two-s{seed}-{i:05d}"))
    return samples


def build_exemplary_set(samples: Sequence, size: int = 5,
                        mode: ExemplaryMode | str = ExemplaryMode.TEST_CROPS, seed: int = 0) -> ExemplarySet:
    mode = ExemplaryMode(mode)
    if size > len(samples):
        raise SizeTooLarge(f"exemplary size {size} exceeds pool of {len(samples)}")
    if size < 1:
        raise SizeTooLarge("exemplary size must be >= 1")
    idx = seeding.rng(seed, "exemplary").choice(len(samples), size=size, replace=False)
    chosen = [samples[i] for i in idx]
    if mode == ExemplaryMode.TEST_CROPS:
        return ExemplarySet(mode, [crop(s.image, s.gt_box) for s in chosen])
    return ExemplarySet(mode, chosen)


# ---------------------------------------------------------------------------
# Persistence

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["version", "samples"],
    "properties": {
        "version": {"const": ANNOTATION_VERSION},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "file", "noise"],
                "properties": {
                    "id": {"type": "string"},
                    "file": {"type": "string"},
                    "label": {"type": ["integer", "null"], "minimum": 0, "maximum": 9},
                    "noise": {"enum": [k.value for k in NoiseKind]},
                    "box": {"type": ["array", "null"], "items": {"type": "number"},
                            "minItems": 4, "maxItems": 4},
                    "boxes": {
                        "type": "object",
                        "additionalProperties": {"type": "array", "items": {"type": "number"},
                                                 "minItems": 4, "maxItems": 4},
                    },
                },
                "additionalProperties": False,
            },
        },
    },
}


def save_dataset(samples: Sequence, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        fname = f"images/{s.id}.png"
        Image.fromarray(s.image, mode="L").save(directory / fname)
        rec = {"id": s.id, "file": fname, "noise": NoiseKind(s.noise).value}
        if isinstance(s, TwoDigitSample):
            rec["boxes"] = {str(d): b.to_list() for d, b in s.boxes.items()}
        else:
            rec["label"] = int(s.label)
            rec["box"] = s.gt_box.to_list() if s.gt_box is not None else None
        records.append(rec)
    doc = {"version": ANNOTATION_VERSION, "samples": records}
    jsonschema.validate(doc, ANNOTATION_SCHEMA)
    (directory / "annotations.json").write_text(json.dumps(doc, indent=1))
    return directory


def load_dataset(directory: Union[str, Path]) -> list:
    directory = Path(directory)
    ann = directory / "annotations.json"
    if not ann.exists():
        raise DatasetIOError(f"missing annotation file {ann}")
    doc = json.loads(ann.read_text())
    if doc.get("version") != ANNOTATION_VERSION:
        raise SchemaMismatch(f"unsupported annotation version {doc.get('version')!r}")
    try:
        jsonschema.validate(doc, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaMismatch(str(exc.message)) from exc
    out = []
    for rec in doc["samples"]:
        path = directory / rec["file"]
        if not path.exists():
            raise DatasetIOError(f"missing image file {path}")
        with Image.open(path) as im:
            image = np.array(im.convert("L"), dtype=np.uint8)
        noise = NoiseKind(rec["noise"])
        if "boxes" in rec:
            boxes = {int(k): Box.from_array(v) for k, v in rec["boxes"].items()}
            out.append(TwoDigitSample(image, boxes, rec["id"], noise))
        else:
            box = Box.from_array(rec["box"]) if rec.get("box") is not None else None
            out.append(ImageSample(image, box, rec["label"], noise, rec["id"]))
    return out
