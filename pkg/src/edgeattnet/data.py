"""Dataset handling: COCO-style polygon annotations, splits, sample caching,
and a synthetic filament-disk generator for desk-scale experiments."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .imgio import read_gray, read_mask, write_mask_png, write_png
from .metrics import InstanceMask, MaskSet
from .preprocess import GrayImage

log = logging.getLogger(__name__)


@dataclass
class AnnotationRecord:
    image_id: str
    file_name: str
    width: int
    height: int
    polygons: list                      # each a flat [x0, y0, x1, y1, ...]
    spines: list = field(default_factory=list)  # polylines, pass-through only


@dataclass
class Sample:
    image_id: str
    image: GrayImage
    instances: list                     # list[InstanceMask]
    union: np.ndarray                   # pixelwise OR of all instances

    def gt_set(self) -> MaskSet:
        return MaskSet(image_id=self.image_id, instances=self.instances)


# ---------------------------------------------------------------------------
# polygon rasterization


def rasterize_polygon(coords, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill; a pixel is set iff its center lies inside.

    Vertex coordinates are clamped into the image bounds first. Degenerate
    polygons rasterize to an empty mask, which callers flag and skip.
    """
    if len(coords) < 6 or len(coords) % 2:
        raise ValueError(f"polygon needs >= 3 (x, y) vertices, got {len(coords)} values")
    xs = np.clip(np.asarray(coords[0::2], dtype=np.float64), 0.0, float(width))
    ys = np.clip(np.asarray(coords[1::2], dtype=np.float64), 0.0, float(height))
    bits = np.zeros((height, width), dtype=bool)
    n = xs.size
    y_lo = max(int(math.floor(ys.min() - 0.5)), 0)
    y_hi = min(int(math.ceil(ys.max() + 0.5)), height)
    for row in range(y_lo, y_hi):
        py = row + 0.5
        crossings = []
        for i in range(n):
            x1, y1 = xs[i], ys[i]
            x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
            if (y1 > py) != (y2 > py):
                crossings.append(x1 + (py - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            # pixel centers x + 0.5 inside [a, b)
            first = max(int(math.ceil(a - 0.5)), 0)
            last = min(int(math.ceil(b - 0.5)), width)
            if last > first:
                bits[row, first:last] = True
    return bits


# ---------------------------------------------------------------------------
# COCO-style ingestion


def load_annotations(path):
    """Parse a COCO-style JSON document into per-image annotation records.

    Images without any annotation are dropped. Returns (records, warnings)
    where warnings counts malformed entries that were skipped.
    """
    with open(path) as fh:
        doc = json.load(fh)
    images = {img["id"]: img for img in doc.get("images", [])}
    by_image: dict = {}
    warnings = 0
    for ann in doc.get("annotations", []):
        img = images.get(ann.get("image_id"))
        if img is None:
            warnings += 1
            log.warning("annotation %s references unknown image %s",
                        ann.get("id"), ann.get("image_id"))
            continue
        segs = ann.get("segmentation") or []
        polys = [seg for seg in segs if isinstance(seg, list) and len(seg) >= 6]
        bad = len(segs) - len(polys)
        if bad:
            warnings += bad
            log.warning("image %s: skipped %d malformed polygon(s)", img["id"], bad)
        if not polys:
            continue
        rec = by_image.get(img["id"])
        if rec is None:
            rec = AnnotationRecord(image_id=str(img["id"]),
                                   file_name=img.get("file_name", f"{img['id']}.png"),
                                   width=int(img["width"]), height=int(img["height"]),
                                   polygons=[])
        rec.polygons.extend(polys)
        if "spine" in ann:
            rec.spines.append(ann["spine"])
        by_image[img["id"]] = rec
    dropped = len(images) - len(by_image)
    if dropped:
        log.info("dropped %d image(s) without annotations", dropped)
    if not by_image:
        log.warning("annotation document %s produced zero usable records", path)
    records = [by_image[k] for k in sorted(by_image)]
    return records, warnings


def build_samples(records, image_dir):
    """Load images and rasterize polygons; one Sample per annotated image.

    Overlapping polygons (e.g. duplicate annotators) stay separate instances;
    the union mask is the training target. Returns (samples, warnings).
    """
    samples, warnings = [], 0
    for rec in records:
        path = os.path.join(image_dir, rec.file_name)
        if not os.path.exists(path):
            warnings += 1
            log.warning("missing image file %s, sample skipped", path)
            continue
        image = read_gray(path)
        instances = []
        for poly in rec.polygons:
            bits = rasterize_polygon(poly, rec.width, rec.height)
            if not bits.any():
                warnings += 1
                log.warning("image %s: degenerate polygon rasterized empty", rec.image_id)
                continue
            instances.append(InstanceMask(bits))
        if not instances:
            warnings += 1
            log.warning("image %s: no usable instances, sample dropped", rec.image_id)
            continue
        union = np.zeros((rec.height, rec.width), dtype=bool)
        for inst in instances:
            union |= inst.bits
        samples.append(Sample(image_id=rec.image_id, image=image,
                              instances=instances, union=union))
    return samples, warnings


def split(samples, n_train: int, n_val: int, n_test: int, seed: int):
    """Seeded shuffle then partition into disjoint train/val/test lists."""
    total = n_train + n_val + n_test
    if total > len(samples):
        raise ValueError(f"split {n_train}+{n_val}+{n_test} exceeds {len(samples)} samples")
    ids = [s.image_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in sample list")
    order = np.random.default_rng(seed).permutation(len(samples))
    picked = [samples[i] for i in order[:total]]
    return (picked[:n_train],
            picked[n_train:n_train + n_val],
            picked[n_train + n_val:total])


# ---------------------------------------------------------------------------
# synthetic filament disks


@dataclass
class SyntheticConfig:
    """Generator knobs; the seed fully determines the output."""
    n_images: int = 8
    image_size: int = 64
    disk_radius: tuple = (0.70, 0.88)       # fraction of half the image size
    filaments_per_image: tuple = (1, 3)
    spine_length: tuple = (0.5, 1.1)        # fraction of the disk radius
    spine_curvature: tuple = (0.1, 0.45)    # control-point offset / length
    spine_width: tuple = (2, 4)             # stroke width, pixels
    barbs_per_filament: tuple = (2, 5)
    barb_length: tuple = (0.10, 0.22)       # fraction of the disk radius
    barb_angle: tuple = (25.0, 60.0)        # degrees from the spine tangent
    alternate_barb_sides: bool = True
    limb_coefficient: float = 0.4
    contrast: float = 0.35
    noise_sigma: float = 0.01
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SyntheticConfig":
        d = json.loads(text)
        for key in ("disk_radius", "filaments_per_image", "spine_length",
                    "spine_curvature", "spine_width", "barbs_per_filament",
                    "barb_length", "barb_angle"):
            d[key] = tuple(d[key])
        return SyntheticConfig(**d)


def _stamp_stroke(bits: np.ndarray, points: np.ndarray, radius: float):
    """Mark all pixels within `radius` of the sampled polyline points."""
    h, w = bits.shape
    r_int = max(int(math.ceil(radius)), 0)
    for px, py in points:
        x0, x1 = max(int(px) - r_int, 0), min(int(px) + r_int + 1, w)
        y0, y1 = max(int(py) - r_int, 0), min(int(py) + r_int + 1, h)
        if x1 <= x0 or y1 <= y0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        bits[y0:y1, x0:x1] |= (xx + 0.5 - px) ** 2 + (yy + 0.5 - py) ** 2 <= radius ** 2


@dataclass
class FilamentShape:
    spine_bits: np.ndarray
    barb_bits: np.ndarray

    @property
    def bits(self) -> np.ndarray:
        return self.spine_bits | self.barb_bits


def render_filament(rng: np.random.Generator, cfg: SyntheticConfig,
                    cx: float, cy: float, disk_r: float) -> FilamentShape:
    """A dark curved spine (quadratic Bezier) with lateral barbs."""
    size = cfg.image_size
    # endpoints kept within 0.85 r of the disk center
    ang = rng.uniform(0.0, 2.0 * math.pi)
    length = rng.uniform(*cfg.spine_length) * disk_r
    for _ in range(20):
        rad = rng.uniform(0.0, 0.55) * disk_r
        theta = rng.uniform(0.0, 2.0 * math.pi)
        p0 = np.array([cx + rad * math.cos(theta), cy + rad * math.sin(theta)])
        p2 = p0 + length * np.array([math.cos(ang), math.sin(ang)])
        if math.hypot(p2[0] - cx, p2[1] - cy) <= 0.85 * disk_r:
            break
        ang += 0.7
    else:
        p2 = np.array([cx, cy])
    mid = 0.5 * (p0 + p2)
    direction = (p2 - p0) / max(np.linalg.norm(p2 - p0), 1e-9)
    perp = np.array([-direction[1], direction[0]])
    bend = rng.uniform(*cfg.spine_curvature) * length * (1 if rng.random() < 0.5 else -1)
    p1 = mid + bend * perp

    n_pts = max(12, int(3 * length))
    t = np.linspace(0.0, 1.0, n_pts)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2
    width = rng.uniform(*cfg.spine_width)
    spine_bits = np.zeros((size, size), dtype=bool)
    _stamp_stroke(spine_bits, curve, width / 2.0)

    barb_bits = np.zeros((size, size), dtype=bool)
    n_barbs = int(rng.integers(cfg.barbs_per_filament[0], cfg.barbs_per_filament[1] + 1))
    side = 1
    for _ in range(n_barbs):
        tb = rng.uniform(0.15, 0.85)
        base = ((1 - tb) ** 2 * p0 + 2 * tb * (1 - tb) * p1 + tb ** 2 * p2)
        tangent = 2 * (1 - tb) * (p1 - p0) + 2 * tb * (p2 - p1)
        tnorm = tangent / max(np.linalg.norm(tangent), 1e-9)
        phi = math.radians(rng.uniform(*cfg.barb_angle)) * side
        if cfg.alternate_barb_sides:
            side = -side
        elif rng.random() < 0.5:
            side = -side
        rot = np.array([[math.cos(phi), -math.sin(phi)],
                        [math.sin(phi), math.cos(phi)]])
        bdir = rot @ tnorm
        blen = rng.uniform(*cfg.barb_length) * disk_r
        pts = base[None, :] + np.linspace(0.0, blen, max(6, int(2 * blen)))[:, None] * bdir
        _stamp_stroke(barb_bits, pts, max(width - 1.0, 1.0) / 2.0)
    return FilamentShape(spine_bits=spine_bits, barb_bits=barb_bits)


def generate_synthetic(cfg: SyntheticConfig):
    """Synthetic limb-darkened disks with dark filaments and exact masks.

    Filament pixels are darkened 1.5x the configured contrast below the
    local background so sample means stay separated by at least `contrast`
    even after noise. Returns a list of (GrayImage, MaskSet) pairs.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    out = []
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    for i in range(cfg.n_images):
        disk_r = rng.uniform(*cfg.disk_radius) * size / 2.0
        margin = size / 2.0 - disk_r - 1.0
        cx = size / 2.0 + rng.uniform(-1.0, 1.0) * max(margin, 0.0)
        cy = size / 2.0 + rng.uniform(-1.0, 1.0) * max(margin, 0.0)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) / disk_r
        img = np.zeros((size, size))
        inside = d <= 1.0
        img[inside] = 0.9 * (1.0 - cfg.limb_coefficient * d[inside] ** 2)

        instances = []
        n_fil = int(rng.integers(cfg.filaments_per_image[0],
                                 cfg.filaments_per_image[1] + 1))
        for _ in range(n_fil):
            shape = render_filament(rng, cfg, cx, cy, disk_r)
            bits = shape.bits & inside
            if not bits.any():
                continue
            img[bits] = np.maximum(img[bits] - 1.5 * cfg.contrast, 0.01)
            instances.append(InstanceMask(bits))
        if cfg.noise_sigma > 0.0:
            img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        img = np.clip(img, 0.0, 1.0)
        out.append((GrayImage(img),
                    MaskSet(image_id=f"synth_{i:04d}", instances=instances)))
    return out


# ---------------------------------------------------------------------------
# sample cache (images + per-instance mask PNGs + JSON index)


def write_sample_cache(dir_path, items):
    """Persist (GrayImage, MaskSet) pairs as PNGs plus an index.json."""
    os.makedirs(os.path.join(dir_path, "images"), exist_ok=True)
    os.makedirs(os.path.join(dir_path, "masks"), exist_ok=True)
    index = []
    for image, mask_set in items:
        img_rel = os.path.join("images", f"{mask_set.image_id}.png")
        write_png(os.path.join(dir_path, img_rel), image.pixels)
        inst_rels = []
        for k, inst in enumerate(mask_set.instances):
            rel = os.path.join("masks", f"{mask_set.image_id}_inst{k:02d}.png")
            write_mask_png(os.path.join(dir_path, rel), inst.bits)
            inst_rels.append(rel)
        index.append({"id": mask_set.image_id, "image": img_rel,
                      "width": image.width, "height": image.height,
                      "instances": inst_rels})
    with open(os.path.join(dir_path, "index.json"), "w") as fh:
        json.dump({"samples": index}, fh, indent=2, sort_keys=True)


def load_sample_cache(dir_path):
    """Load a cache directory back into Sample objects."""
    with open(os.path.join(dir_path, "index.json")) as fh:
        index = json.load(fh)["samples"]
    samples = []
    for entry in index:
        image = read_gray(os.path.join(dir_path, entry["image"]))
        instances = [InstanceMask(read_mask(os.path.join(dir_path, rel)))
                     for rel in entry["instances"]]
        union = np.zeros(image.pixels.shape, dtype=bool)
        for inst in instances:
            union |= inst.bits
        samples.append(Sample(image_id=entry["id"], image=image,
                              instances=instances, union=union))
    return samples
