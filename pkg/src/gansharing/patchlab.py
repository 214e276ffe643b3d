"""Region-of-interest patch extraction.

Healthy boxes are rejection-sampled inside lesion-free images, lesion boxes
are squares around the lesion's tight box plus a margin, and both go through
the same zoom / shift / area-resize routine.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio

FULL_MARGIN_PX = 60
FULL_INPUT_SIDE = 128
MAX_BACKGROUND_FRACTION = 0.40
ATTEMPTS_PER_BOX = 200
HEALTHY, NON_HEALTHY = "healthy", "non_healthy"
SCOPES = ("all_lesions", "masses_only")


class PatchError(ValueError):
    pass


class BudgetExhausted(PatchError):
    def __init__(self, message, boxes):
        super().__init__(message)
        self.boxes = boxes


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise PatchError(f"box needs positive extent, got {self}")

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def to_json(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_json(cls, v) -> "BoundingBox":
        return cls(*map(int, v))


@dataclass
class Geometry:
    """Full-scale constants multiplied by one geometry factor."""

    factor: float = 0.5

    @property
    def margin(self) -> int:
        return int(round(FULL_MARGIN_PX * self.factor))

    @property
    def input_side(self) -> int:
        return int(round(FULL_INPUT_SIDE * self.factor))


@dataclass
class AugmentParams:
    out_side: int = 64
    sigma_zoom: float = 0.1
    sigma_shift: float = 0.05
    zoom_min: float = 0.8
    zoom_max: float = 1.25


@dataclass
class PatchRecord:
    pixels: np.ndarray  # (S, S) float32 in [0, 1]
    label: str
    lesion_kinds: tuple = ()
    source_centre: str = ""
    provenance: dict = field(default_factory=lambda: {"type": "real"})
    origin_box: BoundingBox | None = None
    crop_box: BoundingBox | None = None
    patient_id: str = ""
    density_class: int = 0
    image_id: str = ""

    @property
    def y(self) -> int:
        return 1 if self.label == NON_HEALTHY else 0

    @property
    def is_synthetic(self) -> bool:
        return self.provenance.get("type") == "synthetic"

    def meta(self) -> dict:
        return {
            "label": self.label, "lesion_kinds": list(self.lesion_kinds), "source_centre": self.source_centre,
            "provenance": self.provenance, "patient_id": self.patient_id, "density_class": self.density_class,
            "image_id": self.image_id,
            "origin_box": self.origin_box.to_json() if self.origin_box else None,
            "crop_box": self.crop_box.to_json() if self.crop_box else None,
        }


# -- thresholds -----------------------------------------------------------------
def otsu_threshold(pixels: np.ndarray, bins: int = 1024) -> float:
    """Intensity maximizing between-class variance; pixels below it count as background."""
    data = pixels.astype(np.float64).ravel()
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return hi + 1.0 if lo <= 0 else lo
    hist, edges = np.histogram(data, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centres)
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    m1 = np.divide(s0[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def background_fraction(pixels: np.ndarray, box: BoundingBox, threshold: float) -> float:
    crop = pixels[box.y:box.y + box.h, box.x:box.x + box.w]
    return float((crop < threshold).mean())


# -- boxes --------------------------------------------------------------------------
def sample_healthy_boxes(image, annotation, count: int, rng: np.random.Generator,
                         geometry: Geometry | None = None, side: int | None = None,
                         attempts_per_box: int = ATTEMPTS_PER_BOX) -> list:
    """Random square boxes inside a lesion-free image with <= 40% background pixels."""
    if annotation.lesions:
        raise PatchError(f"image {annotation.image_id} has lesions; healthy boxes need a healthy image")
    geometry = geometry or Geometry()
    pixels = image.pixels
    h, w = pixels.shape
    thr = otsu_threshold(pixels)
    nominal = geometry.input_side
    boxes: list = []
    budget = attempts_per_box * count
    for _ in range(budget):
        if len(boxes) == count:
            break
        s = side if side is not None else int(round(rng.uniform(0.8, 1.2) * nominal))
        s = min(s, h, w)
        x = int(rng.integers(0, w - s + 1))
        y = int(rng.integers(0, h - s + 1))
        box = BoundingBox(x, y, s, s)
        if background_fraction(pixels, box, thr) <= MAX_BACKGROUND_FRACTION:
            boxes.append(box)
    if len(boxes) < count:
        raise BudgetExhausted(f"image {annotation.image_id}: only {len(boxes)} of {count} healthy boxes "
                              f"found within {budget} attempts", boxes)
    return boxes


def tight_box(contour: np.ndarray) -> BoundingBox:
    x0, y0 = np.floor(contour.min(axis=0)).astype(int)
    x1, y1 = np.ceil(contour.max(axis=0)).astype(int)
    return BoundingBox(int(x0), int(y0), max(int(x1 - x0), 1), max(int(y1 - y0), 1))


def lesion_box(image_width: int, image_height: int, contour: np.ndarray, margin: int) -> BoundingBox:
    """Square of side max(w, h) + 2*margin centred on the tight box, translated (never shrunk) into the image."""
    tb = tight_box(np.asarray(contour, dtype=np.float64))
    side = max(tb.w, tb.h) + 2 * margin
    if side > image_width or side > image_height:
        raise PatchError(f"lesion box side {side} exceeds image {image_width}x{image_height}")
    x = tb.x + (tb.w - side) // 2
    y = tb.y + (tb.h - side) // 2
    x = min(max(x, 0), image_width - side)
    y = min(max(y, 0), image_height - side)
    return BoundingBox(x, y, side, side)


# -- resize and augmentation --------------------------------------------------------
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix: each row averages the exactly covered input interval."""
    ratio = n_in / n_out
    edges = np.arange(n_out + 1) * ratio
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / ratio


def area_resize(arr: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    out_w = out_h if out_w is None else out_w
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == (out_h, out_w):
        return arr.copy()
    return _area_weights(arr.shape[0], out_h) @ arr @ _area_weights(arr.shape[1], out_w).T


def _normalize(pixels: np.ndarray) -> np.ndarray:
    scale = 255.0 if pixels.dtype == np.uint8 else 65535.0
    return pixels.astype(np.float64) / scale


def augment_box(box: BoundingBox, width: int, height: int, rng: np.random.Generator,
                params: AugmentParams) -> BoundingBox:
    """Zoom about the box centre, then shift by normal amounts, clamped into the image."""
    zoom = float(np.clip(rng.normal(1.0, params.sigma_zoom) if params.sigma_zoom > 0 else 1.0,
                         params.zoom_min, params.zoom_max))
    side = int(round(box.w * zoom))
    side = max(1, min(side, width, height))
    cx, cy = box.x + box.w / 2.0, box.y + box.h / 2.0
    dx = rng.normal(0.0, params.sigma_shift * side) if params.sigma_shift > 0 else 0.0
    dy = rng.normal(0.0, params.sigma_shift * side) if params.sigma_shift > 0 else 0.0
    x = int(math.floor(cx - side / 2.0 + dx + 0.5))
    y = int(math.floor(cy - side / 2.0 + dy + 0.5))
    x = min(max(x, 0), width - side)
    y = min(max(y, 0), height - side)
    return BoundingBox(x, y, side, side)


def augment_and_crop(image, box: BoundingBox, rng: np.random.Generator, params: AugmentParams):
    """Return (pixels S x S in [0, 1], augmented box). Identical for both classes."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    h, w = pixels.shape
    if not box.inside(w, h):
        raise PatchError(f"box {box} is not inside the {w}x{h} image")
    aug = augment_box(box, w, h, rng, params)
    crop = _normalize(pixels[aug.y:aug.y + aug.h, aug.x:aug.x + aug.w])
    out = np.clip(area_resize(crop, params.out_side), 0.0, 1.0)
    return out.astype(np.float32), aug


# -- dataset ----------------------------------------------------------------------------
def image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(image_id.encode("utf-8"))])


def _make_patch(image, box, rng, params, label, kinds, centre, meta) -> PatchRecord:
    pixels, aug = augment_and_crop(image, box, rng, params)
    return PatchRecord(pixels=pixels, label=label, lesion_kinds=tuple(kinds), source_centre=centre,
                       provenance={"type": "real"}, origin_box=box, crop_box=aug, **meta)


def extract_dataset(corpus: list, scope: str, seed: int, geometry: Geometry | None = None,
                    healthy_per_image: int = 3, params: AugmentParams | None = None,
                    centre_id: str = "", include_healthy: bool = True) -> list:
    """Healthy and lesion patches for every image of ``corpus``.

    Under ``masses_only`` only mass lesions yield non-healthy patches; healthy
    patches always come from lesion-free images.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if not corpus:
        raise PatchError("empty corpus")
    geometry = geometry or Geometry()
    params = params or AugmentParams(out_side=geometry.input_side)
    records = []
    for image, ann in corpus:
        rng = image_rng(seed, ann.image_id)
        meta = dict(patient_id=ann.patient_id, density_class=ann.density, image_id=ann.image_id)
        centre = centre_id or ann.patient_id.split("-")[0]
        if ann.lesions:
            for les in ann.lesions:
                if scope == "masses_only" and les.kind != "mass":
                    continue
                box = lesion_box(image.width, image.height, les.contour, geometry.margin)
                records.append(_make_patch(image, box, rng, params, NON_HEALTHY, (les.kind,), centre, meta))
        elif include_healthy and healthy_per_image > 0:
            try:
                boxes = sample_healthy_boxes(image, ann, healthy_per_image, rng, geometry)
            except BudgetExhausted as exc:
                boxes = exc.boxes
            for box in boxes:
                records.append(_make_patch(image, box, rng, params, HEALTHY, (), centre, meta))
    n_pos = sum(r.label == NON_HEALTHY for r in records)
    n_neg = len(records) - n_pos
    if n_pos == 0 or (include_healthy and n_neg == 0):
        raise PatchError(f"scope {scope}: empty class (non_healthy={n_pos}, healthy={n_neg})")
    return records


def count_by_label(records) -> dict:
    out = {HEALTHY: 0, NON_HEALTHY: 0}
    for r in records:
        out[r.label] += 1
    return out


# -- persistence ----------------------------------------------------------------------
def write_patches(records: list, out_dir) -> None:
    """8-bit PGM per patch plus ``index.json`` carrying labels and provenance."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    index = []
    for i, rec in enumerate(records):
        name = f"patch_{i:06d}.pgm"
        q = np.round(np.clip(rec.pixels, 0, 1) * 255).astype(np.uint8)
        imageio.write_pgm(out / "patches" / name, q)
        index.append({"file": name, **rec.meta()})
    imageio.write_json(out / "index.json", {"count": len(records), "patches": index})


def read_patches(in_dir) -> list:
    root = Path(in_dir)
    index = imageio.read_json(root / "index.json")
    records = []
    for item in index["patches"]:
        px = imageio.read_pgm(root / "patches" / item["file"]).astype(np.float32) / 255.0
        records.append(PatchRecord(
            pixels=px, label=item["label"], lesion_kinds=tuple(item["lesion_kinds"]),
            source_centre=item["source_centre"], provenance=item["provenance"],
            origin_box=BoundingBox.from_json(item["origin_box"]) if item.get("origin_box") else None,
            crop_box=BoundingBox.from_json(item["crop_box"]) if item.get("crop_box") else None,
            patient_id=item["patient_id"], density_class=item["density_class"], image_id=item["image_id"]))
    return records
