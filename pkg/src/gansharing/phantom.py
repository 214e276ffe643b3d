"""Procedural multi-centre mammogram-like corpora with lesion contours.

Each centre profile exposes a few appearance knobs (intensity offset,
contrast, lesion size and kinds, texture scale) so that corpora from
different centres show a measurable domain shift.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio

LESION_KINDS = ("mass", "calcification_cluster", "architectural_distortion")
MAX_INTENSITY = 65535
BACKGROUND_LEVEL = 0.015  # fraction of max; stays under 2%
DENSITY_PROBS = (0.2, 0.4, 0.3, 0.1)


class ProfileError(ValueError):
    pass


@dataclass
class CentreProfile:
    centre_id: str
    intensity_offset: float = 0.0
    contrast_gain: float = 1.0
    lesion_size_mean_px: float = 30.0
    lesion_size_std_px: float = 6.0
    lesion_kinds: tuple = LESION_KINDS
    background_texture_scale: float = 1.0
    patient_count: int = 20
    width: int = 512
    height: int = 384
    healthy_fraction: float = 0.5
    lesion_contrast: float = 1.0

    def __post_init__(self):
        self.lesion_kinds = tuple(self.lesion_kinds)

    def validate(self) -> None:
        if self.patient_count < 1:
            raise ProfileError(f"patient_count must be >= 1, got {self.patient_count}")
        if not 0.0 <= self.intensity_offset <= 0.3:
            raise ProfileError(f"intensity_offset {self.intensity_offset} outside [0, 0.3]")
        if not 0.5 <= self.contrast_gain <= 2.0:
            raise ProfileError(f"contrast_gain {self.contrast_gain} outside [0.5, 2]")
        if not self.lesion_kinds or any(k not in LESION_KINDS for k in self.lesion_kinds):
            raise ProfileError(f"lesion_kinds must be a nonempty subset of {LESION_KINDS}")
        if not 0.05 <= self.lesion_contrast <= 2.0:
            raise ProfileError(f"lesion_contrast {self.lesion_contrast} outside [0.05, 2]")
        if self.lesion_size_mean_px <= 2 or self.lesion_size_std_px < 0:
            raise ProfileError("lesion size mean must exceed 2 px and std must be >= 0")
        worst = self.lesion_size_mean_px + 3 * self.lesion_size_std_px
        # lesions must fit well inside the breast half-ellipse (semi-minor axis ~0.42 h)
        if worst * 1.3 > 0.42 * self.height or worst * 1.3 > 0.5 * self.width:
            raise ProfileError(f"lesion size {worst:.0f}px too large for a {self.width}x{self.height} breast")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lesion_kinds"] = list(self.lesion_kinds)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CentreProfile":
        return cls(**obj)


@dataclass
class GrayImage:
    image_id: str
    pixels: np.ndarray  # (height, width) uint16
    patient_id: str
    density_class: int
    side: str

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Lesion:
    kind: str
    malignant: bool
    contour: np.ndarray  # (K, 2) x, y
    birads: str | None = None


@dataclass
class Annotation:
    image_id: str
    patient_id: str
    density: int
    side: str
    lesions: list = field(default_factory=list)

    def to_json(self) -> dict:
        lesions = []
        for les in self.lesions:
            item = {"kind": les.kind, "malignant": bool(les.malignant),
                    "contour": [[round(float(x), 2), round(float(y), 2)] for x, y in les.contour]}
            if les.birads is not None:
                item["birads"] = les.birads
            lesions.append(item)
        return {"image": self.image_id, "patient_id": self.patient_id, "density": self.density,
                "side": self.side, "lesions": lesions}

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        lesions = [Lesion(l["kind"], bool(l.get("malignant", False)),
                          np.asarray(l["contour"], dtype=np.float64).reshape(-1, 2), l.get("birads"))
                   for l in obj.get("lesions", [])]
        return cls(obj["image"], obj["patient_id"], int(obj["density"]), obj.get("side", "L"), lesions)


# -- geometry helpers ---------------------------------------------------------
def polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def equivalent_diameter(contour: np.ndarray) -> float:
    return 2.0 * math.sqrt(polygon_area(contour) / math.pi)


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple_polygon(pts: np.ndarray) -> bool:
    n = len(pts)
    if n < 3:
        return False
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a, b, pts[j], pts[(j + 1) % n]):
                return False
    return True


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule test for arrays of points."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        cond = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x0 - x1) * (py - y1) / (y0 - y1) + x1
        inside ^= cond & (px < xcross)
        x0, y0 = x1, y1
    return inside


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: float) -> np.ndarray:
    """Bilinearly upsampled coarse Gaussian noise, roughly unit variance."""
    gh, gw = max(2, int(math.ceil(h / cell)) + 1), max(2, int(math.ceil(w / cell)) + 1)
    coarse = rng.standard_normal((gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    rows = np.stack([np.interp(xs, np.arange(gw), coarse[i]) for i in range(gh)])
    return np.stack([np.interp(ys, np.arange(gh), rows[:, j]) for j in range(w)], axis=1)


# -- lesions ------------------------------------------------------------------
def render_lesion(kind: str, size_px: float, rng: np.random.Generator):
    """Return (stamp, contour): an additive intensity stamp in [0, 1] and its (K, 2) contour.

    The contour is in stamp coordinates (x right, y down, pixel centres at
    integers). ``size_px`` is the lesion's equivalent-circle diameter for
    masses and the cluster/star diameter for the other kinds.
    """
    if kind not in LESION_KINDS:
        raise ValueError(f"unknown lesion kind {kind!r}")
    if size_px < 3:
        raise ValueError(f"lesion size must be >= 3 px, got {size_px}")
    if kind == "mass":
        return _render_mass(size_px, rng)
    if kind == "calcification_cluster":
        return _render_calcifications(size_px, rng)
    return _render_distortion(size_px, rng)


def _render_mass(size_px, rng):
    aspect = rng.uniform(0.6, 1.0)
    a = 0.5 * size_px / math.sqrt(aspect)
    b = 0.5 * size_px * math.sqrt(aspect)
    rot = rng.uniform(0, math.pi)
    spiculated = rng.random() < 0.3
    n_spikes = int(rng.integers(5, 10)) if spiculated else 0
    spike_phase = rng.uniform(0, 2 * math.pi)

    def radius(theta):
        t = theta - rot
        r = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
        if n_spikes:
            r = r * (1.0 + 0.18 * np.maximum(0.0, np.cos(n_spikes * theta + spike_phase)) ** 8)
        return r

    # keep the equivalent diameter at size_px despite the spikes
    thetas = np.linspace(0, 2 * math.pi, 96, endpoint=False)
    r_k = radius(thetas)
    area = 0.5 * np.sum(r_k * np.roll(r_k, -1) * math.sin(2 * math.pi / 96))
    scale = (0.5 * size_px) / math.sqrt(area / math.pi)
    r_k = r_k * scale

    half = int(math.ceil(r_k.max())) + 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    rho = np.hypot(xx, yy)
    theta = np.mod(np.arctan2(yy, xx), 2 * math.pi)
    r_at = radius(theta) * scale
    u = rho / r_at
    core = 0.55
    profile = np.where(u < core, 1.0, 0.5 * (1 + np.cos(np.pi * np.clip((u - core) / (1 - core), 0, 1))))
    stamp = np.where(u < 1.0, profile, 0.0)
    contour = np.stack([half + r_k * np.cos(thetas), half + r_k * np.sin(thetas)], axis=1)
    return stamp, contour


def _render_calcifications(size_px, rng):
    n = int(rng.integers(5, 21))
    r = 0.5 * size_px
    half = int(math.ceil(r)) + 3
    stamp = np.zeros((2 * half + 1, 2 * half + 1))
    corners = []
    for _ in range(n):
        rad = r * math.sqrt(rng.random())
        ang = rng.uniform(0, 2 * math.pi)
        cx = int(round(half + rad * math.cos(ang)))
        cy = int(round(half + rad * math.sin(ang)))
        side = int(rng.integers(1, 4))
        x0, y0 = cx - side // 2, cy - side // 2
        stamp[y0:y0 + side, x0:x0 + side] = rng.uniform(0.7, 1.0)
        corners += [(x0 - 0.5, y0 - 0.5), (x0 + side - 0.5, y0 - 0.5),
                    (x0 - 0.5, y0 + side - 0.5), (x0 + side - 0.5, y0 + side - 0.5)]
    contour = _convex_hull(np.asarray(corners))
    return stamp, contour


def _render_distortion(size_px, rng):
    r = 0.5 * size_px
    half = int(math.ceil(r)) + 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    rho = np.hypot(xx, yy)
    theta = np.arctan2(yy, xx)
    n_lines = int(rng.integers(6, 12))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n_lines))
    stamp = np.zeros_like(rho)
    for ang in angles:
        d = np.abs(np.angle(np.exp(1j * (theta - ang)))) * np.maximum(rho, 1e-9)
        stamp = np.maximum(stamp, np.clip(1.0 - d, 0, 1) * (1 - rho / (r + 1e-9)))
    stamp = np.where(rho < r, stamp * 0.6, 0.0)
    thetas = np.linspace(0, 2 * math.pi, 48, endpoint=False)
    contour = np.stack([half + (r + 1) * np.cos(thetas), half + (r + 1) * np.sin(thetas)], axis=1)
    return stamp, contour


# -- images -------------------------------------------------------------------
def _breast_mask(h: int, w: int, side: str):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a, b = 0.82 * w, 0.44 * h
    xc = xx if side == "L" else (w - 1 - xx)
    return ((xc / a) ** 2 + ((yy - (h - 1) / 2) / b) ** 2) <= 1.0


def _render_image(profile: CentreProfile, rng: np.random.Generator, density: int, side: str,
                  lesion_specs: list):
    h, w = profile.height, profile.width
    mask = _breast_mask(h, w, side)
    base = 0.30 + profile.intensity_offset + 0.05 * (density - 1)
    tex = _smooth_noise(rng, h, w, cell=24.0 / max(profile.background_texture_scale, 0.1))
    fine = _smooth_noise(rng, h, w, cell=6.0)
    tissue = base + profile.contrast_gain * (0.05 * tex + 0.02 * fine) * (0.6 + 0.2 * density)
    tissue = np.clip(tissue, 0.12, 0.95)
    img = np.where(mask, tissue, rng.uniform(0.0, BACKGROUND_LEVEL, size=(h, w)))

    lesions = []
    ys, xs = np.nonzero(mask)
    for kind, size in lesion_specs:
        stamp, contour = render_lesion(kind, size, rng)
        sh, sw = stamp.shape
        for _ in range(500):
            i = int(rng.integers(len(ys)))
            cy, cx = ys[i], xs[i]
            y0, x0 = cy - sh // 2, cx - sw // 2
            if y0 < 1 or x0 < 1 or y0 + sh > h - 1 or x0 + sw > w - 1:
                continue
            cont = contour + np.array([x0, y0])
            vx = np.clip(np.round(cont[:, 0]).astype(int), 0, w - 1)
            vy = np.clip(np.round(cont[:, 1]).astype(int), 0, h - 1)
            if mask[vy, vx].all() and mask[y0:y0 + sh, x0:x0 + sw][stamp > 0].all():
                break
        else:
            raise ProfileError(f"could not place a {kind} of size {size:.1f}px inside the breast")
        contrast = 0.35 if kind == "mass" else 0.45
        img[y0:y0 + sh, x0:x0 + sw] += profile.contrast_gain * profile.lesion_contrast * contrast * stamp
        lesions.append(Lesion(kind, bool(rng.random() < 0.5), cont))
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * MAX_INTENSITY).astype(np.uint16), lesions


def generate_corpus(profile: CentreProfile, seed: int) -> list:
    """Deterministic list of (GrayImage, Annotation) pairs for ``profile``.

    Each image draws from its own stream keyed by (seed, patient, image), so
    the output depends only on the inputs.
    """
    profile.validate()
    corpus = []
    for p in range(profile.patient_count):
        prng = np.random.default_rng([seed, p])
        pid = f"{profile.centre_id}-P{p:04d}"
        density = int(prng.choice(4, p=DENSITY_PROBS)) + 1
        n_images = int(prng.integers(1, 5))
        for k in range(n_images):
            irng = np.random.default_rng([seed, p, k + 1])
            side = "L" if irng.random() < 0.5 else "R"
            specs = []
            if irng.random() >= profile.healthy_fraction:
                n_les = 1 if irng.random() < 0.75 else 2
                for _ in range(n_les):
                    kind = profile.lesion_kinds[int(irng.integers(len(profile.lesion_kinds)))]
                    size = float(irng.normal(profile.lesion_size_mean_px, profile.lesion_size_std_px))
                    size = max(size, 0.4 * profile.lesion_size_mean_px, 4.0)
                    specs.append((kind, size))
            pixels, lesions = _render_image(profile, irng, density, side, specs)
            image_id = f"{pid}-I{k}"
            corpus.append((GrayImage(image_id, pixels, pid, density, side),
                           Annotation(image_id, pid, density, side, lesions)))
    return corpus


def write_corpus(corpus: list, out_dir, profile: CentreProfile | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    for image, ann in corpus:
        imageio.write_pgm(out / "images" / f"{image.image_id}.pgm", image.pixels)
        imageio.write_json(out / "annotations" / f"{image.image_id}.json", ann.to_json())
    if profile is not None:
        imageio.write_json(out / "profile.json", profile.to_json())


def read_corpus(corpus_dir) -> list:
    """Read any corpus in the PGM + JSON layout."""
    root = Path(corpus_dir)
    corpus = []
    for image_id in imageio.list_ids(root):
        ann = Annotation.from_json(imageio.read_json(root / "annotations" / f"{image_id}.json"))
        pixels = imageio.read_pgm(root / "images" / f"{ann.image_id}.pgm")
        corpus.append((GrayImage(ann.image_id, pixels, ann.patient_id, ann.density, ann.side), ann))
    return corpus


def foreground_mean(corpus: list) -> float:
    """Mean normalized intensity over breast-foreground pixels of a corpus."""
    total, count = 0.0, 0
    for image, _ in corpus:
        px = image.pixels.astype(np.float64) / MAX_INTENSITY
        fg = px > 2 * BACKGROUND_LEVEL
        total += px[fg].sum()
        count += int(fg.sum())
    return total / max(count, 1)
