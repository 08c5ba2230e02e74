"""Toy shapes dataset, PPM/PGM codecs and a COCO-subset annotation reader."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import GroundTruthBox, iou

log = logging.getLogger(__name__)

CLASS_NAMES = ("rectangle", "ellipse")
MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


class DataError(ValueError):
    """Malformed image or annotation data."""


def splitmix64(x: int) -> int:
    z = (x + GOLDEN64) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for image ``index``; does not depend on generation order."""
    key = (seed ^ ((index * GOLDEN64) & MASK64)) & MASK64
    return np.random.Generator(np.random.PCG64(splitmix64(key)))


@dataclass
class ShapesSpec:
    image_size: int = 96
    num_images: int = 100
    seed: int = 7
    min_objects: int = 1
    max_objects: int = 5
    min_size_frac: float = 0.05
    max_size_frac: float = 0.9
    max_iou: float = 0.3
    max_attempts: int = 50

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError("image_size must be a positive multiple of 32")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is invalid")
        if not 0 < self.min_size_frac < self.max_size_frac <= 1:
            raise ValueError("size range is invalid")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class DatasetRecord:
    image_id: int
    image: np.ndarray  # 1 x 3 x S x S, values in [0, 1]
    gts: list[GroundTruthBox] = field(default_factory=list)
    file_name: str | None = None

    @property
    def boxes(self) -> np.ndarray:
        return np.array([g.box for g in self.gts], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([g.class_id for g in self.gts], dtype=np.int64)


def _shape_mask(size: int, box, kind: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:
        mask[y1:y2, x1:x2] = True
        return mask
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
    yy, xx = np.mgrid[y1:y2, x1:x2]
    mask[y1:y2, x1:x2] = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
    return mask


def make_image(spec: ShapesSpec, index: int) -> DatasetRecord:
    rng = image_rng(spec.seed, index)
    s = spec.image_size
    img = rng.uniform(0.0, 0.2, size=(3, s, s))
    lo, hi = math.log(spec.min_size_frac * s), math.log(spec.max_size_frac * s)
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[tuple[int, int, int, int], int]] = []
    while len(placed) < target:
        for _ in range(spec.max_attempts):
            kind = int(rng.integers(len(CLASS_NAMES)))
            side = math.exp(rng.uniform(lo, hi))
            aspect = math.exp(rng.uniform(math.log(2 / 3), math.log(3 / 2)))
            w = int(min(max(round(side * math.sqrt(aspect)), 2), s))
            h = int(min(max(round(side / math.sqrt(aspect)), 2), s))
            x1 = int(rng.integers(0, s - w + 1))
            y1 = int(rng.integers(0, s - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(iou(box, other) <= spec.max_iou for other, _ in placed):
                placed.append((box, kind))
                break
        else:
            break  # crowded image: keep fewer objects
    gts = []
    for box, kind in placed:
        mask = _shape_mask(s, box, kind)
        color = rng.uniform(0.3, 1.0, size=3)
        img[:, mask] = color[:, None]
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        tight = (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
        gts.append(GroundTruthBox(tight, kind))
    # store 8-bit-representable values so the PPM round trip is lossless
    img = (np.rint(img * 255.0) / 255.0).astype(np.float32)
    return DatasetRecord(index, img[None], gts, f"{index:06d}.ppm")


def gen_shapes(spec: ShapesSpec) -> list[DatasetRecord]:
    return [make_image(spec, i) for i in range(spec.num_images)]


# ------------------------------------------------------------- PPM / PGM


def _quantize_round(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image: np.ndarray) -> bytes:
    """Binary P6 from a ``[1,]3 x H x W`` array in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("write_ppm takes a single image")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W, got {arr.shape}")
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + _quantize_round(arr).transpose(1, 2, 0).tobytes()


def _parse_header(blob: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if blob[:2] != magic:
        raise DataError(f"expected {magic.decode()} header")
    fields: list[int] = []
    pos = 2
    n = len(blob)
    while len(fields) < 3:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError("malformed header")
        fields.append(int(blob[start:pos]))
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise DataError("malformed header")
    w, h, maxval = fields
    if w < 1 or h < 1 or not 1 <= maxval <= 255:
        raise DataError(f"unsupported header values {fields}")
    return w, h, maxval, pos + 1


def read_ppm(blob: bytes) -> np.ndarray:
    """Returns a ``1 x 3 x H x W`` float32 array in [0, 1]."""
    w, h, maxval, start = _parse_header(blob, b"P6")
    need = w * h * 3
    payload = blob[start:start + need]
    if len(payload) < need:
        raise DataError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(maxval))[None]


def write_pgm(gray: np.ndarray) -> bytes:
    """Binary P5; values are truncated to 8 bits (0.5 -> 127)."""
    arr = np.asarray(gray, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    h, w = arr.shape
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    w, h, maxval, start = _parse_header(blob, b"P5")
    payload = blob[start:start + w * h]
    if len(payload) < w * h:
        raise DataError("truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# --------------------------------------------------------------- COCO JSON


@dataclass
class CocoImage:
    image_id: int
    file_name: str
    width: int
    height: int
    gts: list[GroundTruthBox] = field(default_factory=list)


@dataclass
class CocoSubset:
    images: list[CocoImage]
    category_names: list[str]
    category_ids: list[int]
    skipped: int = 0


def _require(obj: dict, keys, what: str) -> None:
    missing = [k for k in keys if k not in obj]
    if missing:
        raise DataError(f"{what} missing keys {missing}")


def load_coco_subset(json_text: str) -> CocoSubset:
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("top level must be an object")
    _require(doc, ("images", "annotations", "categories"), "annotation file")
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    for c in cats:
        _require(c, ("id", "name"), "category")
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    images: dict[int, CocoImage] = {}
    for im in doc["images"]:
        _require(im, ("id", "file_name", "width", "height"), "image")
        images[im["id"]] = CocoImage(im["id"], im["file_name"], int(im["width"]), int(im["height"]))
    skipped = 0
    for ann in doc["annotations"]:
        _require(ann, ("image_id", "bbox", "category_id"), "annotation")
        if ann["image_id"] not in images:
            raise DataError(f"annotation references unknown image id {ann['image_id']}")
        if ann["category_id"] not in cat_index:
            raise DataError(f"annotation references unknown category {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            skipped += 1
            continue
        images[ann["image_id"]].gts.append(GroundTruthBox((x, y, x + w, y + h), cat_index[ann["category_id"]]))
    if skipped:
        log.warning("skipped %d annotations with non-positive size", skipped)
    return CocoSubset(list(images.values()), [c["name"] for c in cats], [c["id"] for c in cats], skipped)


def coco_document(records: list[DatasetRecord], class_names=CLASS_NAMES) -> dict:
    images, anns = [], []
    for r in records:
        s = r.image.shape[-1]
        images.append({"id": r.image_id, "file_name": r.file_name or f"{r.image_id:06d}.ppm",
                       "width": s, "height": r.image.shape[-2]})
        for g in r.gts:
            x1, y1, x2, y2 = g.box
            anns.append({"id": len(anns) + 1, "image_id": r.image_id, "category_id": g.class_id + 1,
                         "bbox": [x1, y1, x2 - x1, y2 - y1]})
    cats = [{"id": i + 1, "name": n} for i, n in enumerate(class_names)]
    return {"images": images, "annotations": anns, "categories": cats}


def write_dataset(records: list[DatasetRecord], out_dir: str | Path, class_names=CLASS_NAMES) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        (out / (r.file_name or f"{r.image_id:06d}.ppm")).write_bytes(write_ppm(r.image))
    doc = coco_document(records, class_names)
    (out / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(root: str | Path) -> tuple[list[DatasetRecord], list[str]]:
    root = Path(root)
    ann = root / "annotations.json"
    if not ann.exists():
        raise DataError(f"{ann} not found")
    subset = load_coco_subset(ann.read_text())
    records = []
    for im in subset.images:
        path = root / im.file_name
        if not path.exists():
            raise DataError(f"image file {path} not found")
        img = read_ppm(path.read_bytes())
        if img.shape[-2:] != (im.height, im.width):
            raise DataError(f"{im.file_name}: size {img.shape[-2:]} disagrees with annotations")
        records.append(DatasetRecord(im.image_id, img, list(im.gts), im.file_name))
    return records, subset.category_names


def dihedral(record: DatasetRecord, code: int) -> DatasetRecord:
    """One of the 8 flips/transposes of a square image, boxes moved along.

    Bit 2 of ``code`` transposes (applied first), bit 0 flips left-right and
    bit 1 flips top-bottom. Code 0 is the identity, code 1 is ``hflip``.
    """
    if not 0 <= code < 8:
        raise ValueError(f"dihedral code must be in [0, 8), got {code}")
    img = record.image
    h, w = img.shape[-2:]
    if code & 4 and h != w:
        raise ValueError("transposing needs a square image")
    boxes = [g.box for g in record.gts]
    if code & 4:
        img = np.swapaxes(img, -1, -2)
        boxes = [(b[1], b[0], b[3], b[2]) for b in boxes]
    if code & 1:
        img = img[..., ::-1]
        boxes = [(w - b[2], b[1], w - b[0], b[3]) for b in boxes]
    if code & 2:
        img = img[..., ::-1, :]
        boxes = [(b[0], h - b[3], b[2], h - b[1]) for b in boxes]
    gts = [GroundTruthBox(b, g.class_id) for b, g in zip(boxes, record.gts)]
    return DatasetRecord(record.image_id, np.ascontiguousarray(img), gts, record.file_name)


def hflip(record: DatasetRecord) -> DatasetRecord:
    return dihedral(record, 1)
