"""Instance-level segmentation metrics.

Pairwise IoU scores every (ground-truth, predicted) instance pair with
non-zero pixel intersection. Multiscale IoU downsamples both masks onto
coarse grids and averages, over a scale set, the fraction of ground-truth
cells that the prediction also covers; the ratio is recall-like and takes
the ground truth as its first argument by definition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCALES = (1.0, 0.5, 0.25, 0.125, 0.0625)


@dataclass
class InstanceMask:
    """One binary instance; must contain at least one set pixel."""
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError(f"instance mask must be 2-D, got shape {self.bits.shape}")
        if not self.bits.any():
            raise ValueError("instance mask has no set pixels")

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class MaskSet:
    """Per-image collection of instances (ground truth or predictions)."""
    image_id: str
    instances: list


@dataclass
class ScaleSet:
    """Grid scales in (0, 1], sorted descending, native resolution included."""
    deltas: tuple = DEFAULT_SCALES

    def __post_init__(self):
        deltas = tuple(sorted(set(float(d) for d in self.deltas), reverse=True))
        if not deltas:
            raise ValueError("scale set is empty")
        if any(d <= 0.0 or d > 1.0 for d in deltas):
            raise ValueError(f"scales must lie in (0, 1], got {deltas}")
        if deltas[0] != 1.0:
            raise ValueError("scale set must include the native resolution delta = 1")
        self.deltas = deltas


@dataclass
class ImageEval:
    image_id: str
    mean_pairwise: float
    mean_multiscale: float
    pair_count: int
    pairs: list = field(default_factory=list)  # (gt_idx, pt_idx, iou, msiou)


@dataclass
class EvalReport:
    per_image: list
    miou_pairwise: float
    miou_multiscale: float
    scales: tuple
    n_images: int
    n_evaluated: int

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "dataset": {
                "miou_pairwise": self.miou_pairwise,
                "miou_multiscale": self.miou_multiscale,
                "n_images": self.n_images,
                "n_evaluated": self.n_evaluated,
            },
            "per_image": [
                {"image_id": r.image_id, "mean_pairwise": r.mean_pairwise,
                 "mean_multiscale": r.mean_multiscale, "pair_count": r.pair_count,
                 "pairs": [list(p) for p in r.pairs]}
                for r in self.per_image
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        per_image = [ImageEval(image_id=r["image_id"], mean_pairwise=r["mean_pairwise"],
                               mean_multiscale=r["mean_multiscale"],
                               pair_count=r["pair_count"],
                               pairs=[tuple(p) for p in r["pairs"]])
                     for r in d["per_image"]]
        ds = d["dataset"]
        return EvalReport(per_image=per_image, miou_pairwise=ds["miou_pairwise"],
                          miou_multiscale=ds["miou_multiscale"],
                          scales=tuple(d["scales"]), n_images=ds["n_images"],
                          n_evaluated=ds["n_evaluated"])


class NoEvaluablePairsError(ValueError):
    """No image in the dataset produced an intersecting gt/prediction pair."""


# ---------------------------------------------------------------------------
# core operations


def connected_components(mask: np.ndarray, min_area: int = 10) -> list:
    """8-connected components of a binary mask, dropping tiny ones."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    out = []
    neighbors = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for sy, sx in zip(*np.nonzero(mask)):
        if labels[sy, sx]:
            continue
        current += 1
        stack = [(sy, sx)]
        labels[sy, sx] = current
        pixels = []
        while stack:
            y, x = stack.pop()
            pixels.append((y, x))
            for dy, dx in neighbors:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                    labels[ny, nx] = current
                    stack.append((ny, nx))
        if len(pixels) >= min_area:
            bits = np.zeros((h, w), dtype=bool)
            ys, xs = zip(*pixels)
            bits[list(ys), list(xs)] = True
            out.append(InstanceMask(bits))
    return out


def iou_pairwise(gt: InstanceMask, pt: InstanceMask) -> float:
    """Intersection over union; zero when the masks do not intersect."""
    if gt.bits.shape != pt.bits.shape:
        raise ValueError(f"mask shapes differ: {gt.bits.shape} vs {pt.bits.shape}")
    inter = np.logical_and(gt.bits, pt.bits).sum()
    if inter == 0:
        return 0.0
    union = np.logical_or(gt.bits, pt.bits).sum()
    return float(inter) / float(union)


def downsample(bits: np.ndarray, delta: float) -> np.ndarray:
    """Coarse grid of ceil(H*delta) x ceil(W*delta); a cell is set iff any
    source pixel mapping to it is set. delta = 1 is the identity."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    bits = np.asarray(bits, dtype=bool)
    if delta == 1.0:
        return bits.copy()
    h, w = bits.shape
    ch, cw = int(np.ceil(h * delta)), int(np.ceil(w * delta))
    grid = np.zeros((ch, cw), dtype=bool)
    ys, xs = np.nonzero(bits)
    cy = np.minimum((ys * delta).astype(np.intp), ch - 1)
    cx = np.minimum((xs * delta).astype(np.intp), cw - 1)
    grid[cy, cx] = True
    return grid


def scale_ratio(gt_bits: np.ndarray, pt_bits: np.ndarray, delta: float) -> float:
    """Fraction of set ground-truth grid cells covered by the prediction grid."""
    g = downsample(gt_bits, delta)
    p = downsample(pt_bits, delta)
    denom = g.sum()
    if denom == 0:
        return 0.0
    return float(np.logical_and(g, p).sum()) / float(denom)


def iou_multiscale(gt: InstanceMask, pt: InstanceMask,
                   scales: ScaleSet | None = None) -> float:
    """Mean of the per-scale covered-cell ratios over the scale set."""
    if gt.bits.shape != pt.bits.shape:
        raise ValueError(f"mask shapes differ: {gt.bits.shape} vs {pt.bits.shape}")
    ss = scales or ScaleSet()
    ratios = [scale_ratio(gt.bits, pt.bits, d) for d in ss.deltas]
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# aggregation


def evaluate_image(gt_set: MaskSet, pt_set: MaskSet,
                   scales: ScaleSet | None = None) -> ImageEval:
    """Score every gt x prediction pair with non-zero pixel intersection.

    Images without any intersecting pair get pair_count 0 and are later
    excluded from dataset means.
    """
    ss = scales or ScaleSet()
    pairs = []
    for gi, gt in enumerate(gt_set.instances):
        for pj, pt in enumerate(pt_set.instances):
            if np.logical_and(gt.bits, pt.bits).any():
                pairs.append((gi, pj,
                              iou_pairwise(gt, pt),
                              iou_multiscale(gt, pt, ss)))
    if not pairs:
        return ImageEval(image_id=gt_set.image_id, mean_pairwise=0.0,
                         mean_multiscale=0.0, pair_count=0, pairs=[])
    return ImageEval(
        image_id=gt_set.image_id,
        mean_pairwise=float(np.mean([p[2] for p in pairs])),
        mean_multiscale=float(np.mean([p[3] for p in pairs])),
        pair_count=len(pairs),
        pairs=pairs,
    )


def evaluate_dataset(records: list, scales: ScaleSet | None = None) -> EvalReport:
    """Arithmetic means of per-image scores over images with at least one pair."""
    ss = scales or ScaleSet()
    scored = [r for r in records if r.pair_count > 0]
    if not scored:
        raise NoEvaluablePairsError("no evaluable pairs in any image")
    return EvalReport(
        per_image=list(records),
        miou_pairwise=float(np.mean([r.mean_pairwise for r in scored])),
        miou_multiscale=float(np.mean([r.mean_multiscale for r in scored])),
        scales=ss.deltas,
        n_images=len(records),
        n_evaluated=len(scored),
    )


def extract_instances(image_id: str, probability: np.ndarray,
                      threshold: float = 0.5, min_area: int = 10) -> MaskSet:
    """Threshold a probability (or binary) map and split it into instances."""
    binary = np.asarray(probability) >= threshold
    return MaskSet(image_id=image_id,
                   instances=connected_components(binary, min_area=min_area))
